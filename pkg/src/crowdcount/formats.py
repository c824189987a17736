"""On-disk formats: density-map / mask containers and the JSON sidecar files.

Binary container layout (little-endian):
    magic   4 bytes   b"DMAP" (float32 density payload) or b"SMSK" (uint8 mask)
    version u32       1
    height  u32
    width   u32
    scale   u32
    payload height*width row-major values

Density payloads round-trip bit-exactly as float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .density import ClassBoundaries, DensityMap, PointAnnotation, SegmentationMask

_HEADER = struct.Struct("<4sIIII")
_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not match its declared container format."""


def _write_container(path, magic: bytes, values: np.ndarray, scale: int) -> None:
    h, w = values.shape
    header = _HEADER.pack(magic, _VERSION, h, w, scale)
    Path(path).write_bytes(header + values.tobytes(order="C"))


def _read_container(path, magic: bytes, dtype) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got_magic, version, h, w, scale = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size :]
    expected = h * w * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return values, scale


def write_density_map(path, dmap: DensityMap) -> None:
    _write_container(path, b"DMAP", dmap.values.astype("<f4"), dmap.scale)


def read_density_map(path) -> DensityMap:
    values, scale = _read_container(path, b"DMAP", "<f4")
    return DensityMap(values, scale=scale)


def write_segmentation_mask(path, mask: SegmentationMask) -> None:
    _write_container(path, b"SMSK", mask.values.astype(np.uint8), mask.scale)


def read_segmentation_mask(path) -> SegmentationMask:
    values, scale = _read_container(path, b"SMSK", np.uint8)
    if not np.isin(values, (0, 1)).all():
        raise FormatError(f"{path}: mask payload contains values outside {{0, 1}}")
    return SegmentationMask(values, scale=scale)


def annotation_to_dict(ann: PointAnnotation) -> dict:
    return {
        "image_id": ann.image_id,
        "width": ann.width,
        "height": ann.height,
        "points": [[float(x), float(y)] for x, y in ann.points],
    }


def annotation_from_dict(obj: dict) -> PointAnnotation:
    try:
        return PointAnnotation(
            image_id=obj["image_id"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            points=np.asarray(obj["points"], dtype=np.float64).reshape(-1, 2),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed annotation object: {exc}") from exc


def save_annotations(path, annotations: list[PointAnnotation]) -> None:
    payload = [annotation_to_dict(a) for a in annotations]
    Path(path).write_text(json.dumps(payload, indent=1))


def load_annotations(path) -> list[PointAnnotation]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [annotation_from_dict(obj) for obj in data]


def save_labels(path, labels: dict[str, int]) -> None:
    """Image-level density-class labels: list of {image_id, class_index}."""
    payload = [{"image_id": k, "class_index": int(v)} for k, v in labels.items()]
    Path(path).write_text(json.dumps(payload, indent=1))


def load_labels(path) -> dict[str, int]:
    data = json.loads(Path(path).read_text())
    labels = {}
    for obj in data:
        idx = int(obj["class_index"])
        if not 0 <= idx <= 5:
            raise FormatError(f"{path}: class_index {idx} out of range 0..5")
        labels[obj["image_id"]] = idx
    return labels


def save_priors(path, boundaries: ClassBoundaries, n: np.ndarray) -> None:
    payload = {
        "boundaries": list(boundaries.thresholds),
        "n": [float(v) for v in n],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_priors(path) -> tuple[ClassBoundaries, np.ndarray]:
    data = json.loads(Path(path).read_text())
    n = np.asarray(data["n"], dtype=np.float64)
    if n.shape != (6,):
        raise FormatError(f"{path}: priors must have 6 entries")
    return ClassBoundaries(tuple(data["boundaries"])), n
