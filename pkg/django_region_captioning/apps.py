from __future__ import annotations

import logging

from django.apps import AppConfig

from django_region_captioning.conf import get_region_provider, get_region_provider_paths

logger = logging.getLogger(__name__)


class RegionCaptioningConfig(AppConfig):
    name = "django_region_captioning"
    verbose_name = "Region Captioning"
    default_auto_field = "django.db.models.BigAutoField"

    def ready(self) -> None:
        # importing the primitives module registers every built-in primitive
        from django_region_captioning import primitives  # noqa: F401
        from django_region_captioning.registry import primitive_registry

        for kind in get_region_provider_paths():
            get_region_provider(kind)
        logger.debug("Registered %d autodiff primitive(s)", len(primitive_registry.get_entries()))
