"""Deterministic synthetic crowd scenes.

Each "person" is a radial-gradient blob rendered onto a flat, gradient, or
textured background; the annotation points are the exact blob centers.
Presets provide a source distribution and a count/appearance-shifted target
distribution for cross-dataset experiments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats
from .density import ClassBoundaries, PointAnnotation, assign_density_class

BACKGROUNDS = ("flat", "gradient", "noise-texture")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 128
    count_range: tuple[int, int] = (5, 40)
    cluster_count: int = 3
    cluster_spread: float = 14.0
    blob_radius_range: tuple[float, float] = (2.0, 5.0)
    blob_brightness: float = 0.55
    background: str = "noise-texture"
    background_level: float = 0.30

    def __post_init__(self):
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count_range {self.count_range}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if self.blob_radius_range[0] <= 0:
            raise ValueError("blob radii must be positive")


PRESETS: dict[str, SceneSpec] = {
    # Clustered mid-density scenes over textured background.
    "source": SceneSpec(
        size=128,
        count_range=(4, 40),
        cluster_count=3,
        cluster_spread=14.0,
        blob_radius_range=(2.0, 5.0),
        blob_brightness=0.55,
        background="noise-texture",
        background_level=0.30,
    ),
    # Denser crowds with smaller, dimmer blobs over a different background:
    # the target side of the distribution-shift experiments.
    "shifted": SceneSpec(
        size=128,
        count_range=(30, 90),
        cluster_count=5,
        cluster_spread=10.0,
        blob_radius_range=(1.5, 3.0),
        blob_brightness=0.40,
        background="gradient",
        background_level=0.38,
    ),
}


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    level = spec.background_level
    if spec.background == "flat":
        img = np.full((s, s, 3), level, dtype=np.float64)
    elif spec.background == "gradient":
        ramp = np.linspace(0.6 * level, 1.4 * level, s)
        img = np.repeat(ramp[:, None], s, axis=1)[..., None] * np.ones(3)
    else:  # noise-texture: smooth clutter plus sparse blob-like distractors
        coarse = rng.uniform(0.4 * level, 1.6 * level, size=(s // 8 + 2, s // 8 + 2, 3))
        img = np.zeros((s, s, 3))
        ys = np.linspace(0, coarse.shape[0] - 1.001, s)
        xs = np.linspace(0, coarse.shape[1] - 1.001, s)
        y0, x0 = ys.astype(int), xs.astype(int)
        fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
        img = (
            coarse[y0][:, x0] * (1 - fy) * (1 - fx)
            + coarse[y0][:, x0 + 1] * (1 - fy) * fx
            + coarse[y0 + 1][:, x0] * fy * (1 - fx)
            + coarse[y0 + 1][:, x0 + 1] * fy * fx
        )
        # Unannotated bumps that resemble dim, oversized people: clutter the
        # counting signal so foreground/background discrimination matters.
        n_bumps = max(0, int(round(s * s / 1300)))
        r_lo, r_hi = spec.blob_radius_range
        for _ in range(n_bumps):
            bx, by = rng.uniform(0, s, size=2)
            radius = rng.uniform(1.3 * r_lo, 1.8 * r_hi)
            tint = rng.uniform(0.7, 0.95, size=3)
            _render_blob(img, bx, by, radius, 0.35 * spec.blob_brightness, tint)
    # Mild per-channel tint so the scene is not grayscale.
    tint = rng.uniform(0.92, 1.08, size=3)
    return np.clip(img * tint, 0.0, 1.0)


def _render_blob(img: np.ndarray, x: float, y: float, radius: float,
                 brightness: float, tint: np.ndarray) -> None:
    s = img.shape[0]
    r_px = int(np.ceil(3 * radius))
    x0, x1 = max(0, int(x) - r_px), min(s, int(x) + r_px + 1)
    y0, y1 = max(0, int(y) - r_px), min(s, int(y) + r_px + 1)
    ys = np.arange(y0, y1, dtype=np.float64)
    xs = np.arange(x0, x1, dtype=np.float64)
    d2 = (ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2
    bump = brightness * np.exp(-d2 / (2.0 * (radius / 1.5) ** 2))
    img[y0:y1, x0:x1] += bump[..., None] * tint


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, PointAnnotation]:
    """Render one scene; returns (HxWx3 float32 image in [0,1], annotation)."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    img = _render_background(spec, rng)

    lo, hi = spec.count_range
    count = int(rng.integers(lo, hi + 1))
    centers = rng.uniform(0, s, size=(max(1, spec.cluster_count), 2))
    points = np.zeros((count, 2))
    for i in range(count):
        c = centers[rng.integers(0, len(centers))]
        p = c + rng.normal(0.0, spec.cluster_spread, size=2)
        points[i] = np.clip(p, 0.0, s - 1e-3)

    for x, y in points:
        radius = rng.uniform(*spec.blob_radius_range)
        tint = rng.uniform(0.85, 1.0, size=3)
        _render_blob(img, x, y, radius, spec.blob_brightness, tint)

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    ann = PointAnnotation(image_id=f"scene_{spec.seed:08d}", width=s, height=s, points=points)
    return img, ann


@dataclass
class DatasetRecord:
    image_id: str
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    annotation: PointAnnotation
    class_index: int


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(
    out_dir,
    n_images: int,
    spec_template: SceneSpec,
    seed: int,
    boundaries: ClassBoundaries | None = None,
) -> list[DatasetRecord]:
    """Write images/*.png, annotations.json, labels.json and manifest.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    boundaries = boundaries or ClassBoundaries()

    records = []
    annotations = []
    labels = {}
    for i in range(n_images):
        spec = replace(spec_template, seed=seed * 1_000_003 + i)
        img, ann = generate_scene(spec)
        image_id = f"img_{i:05d}"
        ann.image_id = image_id
        cls = assign_density_class(ann.count, boundaries)
        Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(out / "images" / f"{image_id}.png")
        annotations.append(ann)
        labels[image_id] = cls.index
        records.append(DatasetRecord(image_id, img, ann, cls.index))

    formats.save_annotations(out / "annotations.json", annotations)
    formats.save_labels(out / "labels.json", labels)

    files = sorted(p for p in (out / "images").iterdir()) + [
        out / "annotations.json",
        out / "labels.json",
    ]
    manifest = {
        "seed": seed,
        "n_images": n_images,
        "spec": asdict(spec_template),
        "boundaries": list(boundaries.thresholds),
        "hashes": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return records


def load_dataset(dataset_dir) -> list[DatasetRecord]:
    root = Path(dataset_dir)
    annotations = formats.load_annotations(root / "annotations.json")
    labels = formats.load_labels(root / "labels.json")
    records = []
    for ann in annotations:
        path = root / "images" / f"{ann.image_id}.png"
        if not path.exists():
            raise FileNotFoundError(f"missing image file {path}")
        img = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        records.append(DatasetRecord(ann.image_id, img, ann, labels[ann.image_id]))
    return records
