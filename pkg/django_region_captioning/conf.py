from __future__ import annotations

from typing import TYPE_CHECKING, ClassVar, Protocol

from django.conf import settings
from django.utils.module_loading import import_string

if TYPE_CHECKING:
    from django_region_captioning.encoder import EncoderOutput
    from django_region_captioning.regions import RegionContext, RegionSet, StnParams

_DEFAULT_REGION_PROVIDERS: dict[str, str] = {
    "grid": "django_region_captioning.regions.GridProvider",
    "proposals": "django_region_captioning.regions.ProposalProvider",
    "stn": "django_region_captioning.regions.SpatialTransformerProvider",
}
_DEFAULT_GRAD_CLIP_NORM = 5.0
_DEFAULT_WORKERS = 1
_DEFAULT_LOG_EVERY = 50


class RegionProvider(Protocol):
    """Protocol for attention-region providers.

    Providers turn encoder output into a
    :class:`~django_region_captioning.regions.RegionSet`. ``uses_hires`` tells
    the model whether to run the high-resolution encoder pathway first.
    """

    kind: ClassVar[str]
    uses_hires: ClassVar[bool]

    def build(self, encoded: EncoderOutput, stn: StnParams | None, context: RegionContext) -> RegionSet: ...


def get_region_provider_paths() -> dict[str, str]:
    """Built-in providers merged with ``REGION_CAPTIONING_REGION_PROVIDERS``."""
    overrides: dict[str, str] = getattr(settings, "REGION_CAPTIONING_REGION_PROVIDERS", {})
    if not isinstance(overrides, dict):
        raise ValueError("REGION_CAPTIONING_REGION_PROVIDERS must be a dict of region kind to dotted path")
    return {**_DEFAULT_REGION_PROVIDERS, **overrides}


def get_region_provider(kind: str) -> RegionProvider:
    """Instantiate the provider registered for ``kind``.

    Raises:
        ValueError: If no provider is configured for ``kind``.
        ImportError: If the configured dotted path cannot be imported.
    """
    paths = get_region_provider_paths()
    if kind not in paths:
        raise ValueError(f"Unknown region kind: {kind!r} (configured: {', '.join(sorted(paths))})")
    provider_class: type[RegionProvider] = import_string(paths[kind])
    return provider_class()


def get_grad_clip_norm() -> float:
    value = float(getattr(settings, "REGION_CAPTIONING_GRAD_CLIP_NORM", _DEFAULT_GRAD_CLIP_NORM))
    if not value > 0:
        raise ValueError(f"REGION_CAPTIONING_GRAD_CLIP_NORM must be positive, got {value}")
    return value


def get_workers() -> int:
    return _positive_int("REGION_CAPTIONING_WORKERS", _DEFAULT_WORKERS)


def get_log_every() -> int:
    return _positive_int("REGION_CAPTIONING_LOG_EVERY", _DEFAULT_LOG_EVERY)


def _positive_int(name: str, default: int) -> int:
    value = getattr(settings, name, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value
