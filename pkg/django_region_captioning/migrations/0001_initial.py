import uuid

from django.db import migrations, models


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="CaptioningRun",
            fields=[
                ("id", models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                (
                    "command",
                    models.CharField(
                        choices=[
                            ("generate_scenes", "Generate scenes"),
                            ("train_captioner", "Train captioner"),
                            ("evaluate_captioner", "Evaluate captioner"),
                            ("visualize_attention", "Visualize attention"),
                            ("sweep_regions", "Sweep regions"),
                            ("run_ablation", "Run ablation"),
                        ],
                        max_length=32,
                    ),
                ),
                (
                    "status",
                    models.CharField(
                        choices=[("running", "Running"), ("succeeded", "Succeeded"), ("failed", "Failed")],
                        default="running",
                        max_length=20,
                    ),
                ),
                ("seed", models.PositiveIntegerField(blank=True, null=True)),
                ("config", models.JSONField(blank=True, default=dict)),
                ("checkpoint_path", models.CharField(blank=True, default="", max_length=500)),
                ("metrics", models.JSONField(blank=True, default=dict)),
                ("error", models.TextField(blank=True, default="")),
                ("started_at", models.DateTimeField(auto_now_add=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "ordering": ["-started_at"],
                "indexes": [models.Index(fields=["command", "started_at"], name="captioning_run_cmd_idx")],
            },
        ),
        migrations.CreateModel(
            name="RunArtifact",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("path", models.CharField(max_length=500, unique=True)),
                (
                    "kind",
                    models.CharField(
                        choices=[
                            ("dataset", "Dataset"),
                            ("checkpoint", "Checkpoint"),
                            ("loss_trace", "Loss trace"),
                            ("manifest", "Manifest"),
                            ("metrics", "Metrics"),
                            ("decodes", "Decodes"),
                            ("image", "Image"),
                            ("overlay", "Overlay"),
                            ("svg", "SVG"),
                            ("sweep", "Sweep"),
                            ("ablation", "Ablation"),
                        ],
                        max_length=20,
                    ),
                ),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=models.deletion.CASCADE,
                        related_name="artifacts",
                        to="django_region_captioning.captioningrun",
                    ),
                ),
            ],
        ),
    ]
