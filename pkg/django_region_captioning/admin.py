from __future__ import annotations

from django.contrib import admin
from django.http import HttpRequest

from django_region_captioning.models import CaptioningRun, RunArtifact


class RunArtifactInline(admin.TabularInline[RunArtifact, CaptioningRun]):
    model = RunArtifact
    fields = ("path", "kind", "created_at")
    readonly_fields = ("path", "kind", "created_at")
    extra = 0
    can_delete = False

    def has_add_permission(self, request: HttpRequest, obj: CaptioningRun | None = None) -> bool:
        return False


@admin.register(CaptioningRun)
class CaptioningRunAdmin(admin.ModelAdmin[CaptioningRun]):
    list_display = ("id", "command", "status", "seed", "checkpoint_path", "started_at", "finished_at")
    list_filter = ("command", "status")
    search_fields = ("checkpoint_path", "artifacts__path")
    ordering = ("-started_at",)
    inlines = [RunArtifactInline]
    readonly_fields = (
        "command",
        "status",
        "seed",
        "config",
        "checkpoint_path",
        "metrics",
        "error",
        "started_at",
        "finished_at",
    )

    def has_add_permission(self, request: HttpRequest) -> bool:
        return False

    def has_change_permission(self, request: HttpRequest, obj: CaptioningRun | None = None) -> bool:
        return False


@admin.register(RunArtifact)
class RunArtifactAdmin(admin.ModelAdmin[RunArtifact]):
    list_display = ("path", "kind", "run", "created_at")
    list_filter = ("kind",)
    search_fields = ("path",)
    ordering = ("-created_at",)

    def has_add_permission(self, request: HttpRequest) -> bool:
        return False

    def has_change_permission(self, request: HttpRequest, obj: RunArtifact | None = None) -> bool:
        return False

    def has_delete_permission(self, request: HttpRequest, obj: RunArtifact | None = None) -> bool:
        return False
