from django_region_captioning.registry import (
    PrimitiveEntry,
    PrimitiveRegistry,
    primitive,
    primitive_registry,
)

__all__ = [
    "PrimitiveEntry",
    "PrimitiveRegistry",
    "primitive",
    "primitive_registry",
]
