"""Checkpoint archives.

A checkpoint is a zip file of stored (uncompressed) entries with fixed
timestamps, so equal models produce byte-identical files:

* ``manifest.json``: format version, model dimensions and options,
  vocabulary and the training configuration;
* one ``<parameter name>.tensor`` entry per parameter: the UTF-8 name and the
  shape as little-endian 64-bit integers, then the row-major values as
  little-endian IEEE-754 doubles.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Any
import io
import json
import logging
import struct
import zipfile

import numpy as np

from django_region_captioning.attention import Feedback
from django_region_captioning.autodiff import FloatArray
from django_region_captioning.model import Ablation, CaptionModel, ModelDims, RegionKind
from django_region_captioning.vocabulary import Vocabulary

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_ENTRY = "manifest.json"
TENSOR_SUFFIX = ".tensor"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: CaptionModel
    vocab: Vocabulary
    config: dict[str, Any] = field(default_factory=dict)


def encode_tensor(name: str, values: FloatArray) -> bytes:
    encoded_name = name.encode("utf-8")
    header = [_U64.pack(len(encoded_name)), encoded_name, _U64.pack(values.ndim)]
    header += [_U64.pack(extent) for extent in values.shape]
    body = np.ascontiguousarray(values, dtype="<f8").tobytes()
    return b"".join(header) + body


def decode_tensor(payload: bytes) -> tuple[str, FloatArray]:
    view = memoryview(payload)
    try:
        (name_len,) = _U64.unpack_from(view, 0)
        offset = _U64.size
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = _U64.unpack_from(view, offset)
        offset += _U64.size
        shape = tuple(_U64.unpack_from(view, offset + i * _U64.size)[0] for i in range(ndim))
        offset += ndim * _U64.size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"truncated or corrupt tensor header ({e})") from e
    count = int(np.prod(shape)) if shape else 1
    if len(payload) - offset != count * 8:
        raise CheckpointError(f"tensor {name!r}: expected {count} values, found {(len(payload) - offset) // 8}")
    values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    return name, values


def _manifest(model: CaptionModel, vocab: Vocabulary, config: Mapping[str, Any]) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "dims": asdict(model.dims),
        "region_kind": str(model.region_kind),
        "feedback": str(model.feedback),
        "ablation": str(model.ablation),
        "frozen": sorted(model.frozen),
        "grid_stride": model.grid_stride,
        "proposal_k": model.proposal_k,
        "vocab": list(vocab.tokens),
        "min_count": vocab.min_count,
        "config": dict(config),
        "parameters": list(model.named_parameters()),
    }


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(
    path: str | Path | IO[bytes],
    model: CaptionModel,
    vocab: Vocabulary,
    config: Mapping[str, Any] | None = None,
) -> None:
    if len(vocab) != model.dims.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, model expects {model.dims.vocab_size}")
    manifest = _manifest(model, vocab, config or {})
    with zipfile.ZipFile(path, "w") as archive:
        archive.writestr(_entry(MANIFEST_ENTRY), json.dumps(manifest, sort_keys=True, indent=2))
        for name, tensor in model.named_parameters().items():
            archive.writestr(_entry(name + TENSOR_SUFFIX), encode_tensor(name, tensor.data))
    logger.info("Saved checkpoint %s (%d tensors)", path, len(manifest["parameters"]))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the model, vocabulary and training config stored at ``path``.

    Raises:
        CheckpointError: If the archive is malformed or does not match its manifest.
    """
    try:
        with zipfile.ZipFile(path) as archive:
            manifest = json.loads(archive.read(MANIFEST_ENTRY))
            tensors = dict(
                decode_tensor(archive.read(info))
                for info in archive.infolist()
                if info.filename.endswith(TENSOR_SUFFIX)
            )
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: not a checkpoint archive ({e})") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')!r}")

    try:
        model = CaptionModel.initialize(
            ModelDims(**manifest["dims"]),
            seed=0,
            region_kind=RegionKind(manifest["region_kind"]),
            feedback=Feedback(manifest["feedback"]),
            ablation=Ablation(manifest["ablation"]),
            grid_stride=int(manifest["grid_stride"]),
            proposal_k=int(manifest["proposal_k"]),
        )
        vocab = Vocabulary(tokens=tuple(manifest["vocab"]), min_count=int(manifest.get("min_count", 1)))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid manifest ({type(e).__name__}: {e})") from e
    expected = model.named_parameters()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, tensor in expected.items():
        if tensors[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {tensor.shape}")
        tensor.data[...] = tensors[name]
    logger.debug("Loaded checkpoint %s", path)
    return Checkpoint(model=model, vocab=vocab, config=dict(manifest.get("config", {})))


def checkpoint_bytes(model: CaptionModel, vocab: Vocabulary, config: Mapping[str, Any] | None = None) -> bytes:
    buffer = io.BytesIO()
    save_checkpoint(buffer, model, vocab, config)
    return buffer.getvalue()
