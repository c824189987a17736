"""Weakly supervised adaptation from image-level density-class labels.

A class-score head on top of the frozen counting network is trained to
classify patches into six density levels, its per-pixel class scores are
aggregated to image scores (mean, max, or log-sum-exp pooling), and the
score maps are converted into pseudo ground-truth density maps by weighting
per-pixel class probabilities with per-class mean counts from the source
set. The counting network is then fine-tuned on the pseudo ground truth
with the backbone (and attention modules) frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .density import ClassBoundaries, assign_density_class
from .model import NUM_DENSITY_CLASSES, CountingNetwork
from .synthdata import DatasetRecord
from .training import TrainingDivergence, density_loss

_PROB_EPS = 1e-7


@dataclass(frozen=True)
class Aggregation:
    """Score-map pooling: 'gap' (mean), 'gmp' (max) or 'lse' (smooth max).

    For LSE, ``r`` controls sharpness: large r approaches the max, small r
    the mean.
    """

    kind: str = "lse"
    r: float = 4.0

    def __post_init__(self):
        if self.kind not in ("gap", "gmp", "lse"):
            raise ValueError(f"unknown aggregation {self.kind!r}")
        if self.kind == "lse" and self.r <= 0:
            raise ValueError("LSE needs r > 0")


def aggregate_scores_torch(scores: torch.Tensor, method: Aggregation) -> torch.Tensor:
    """Pool (B, C, h, w) score maps to (B, C) image-level scores."""
    if method.kind == "gap":
        return scores.mean(dim=(-1, -2))
    if method.kind == "gmp":
        return scores.amax(dim=(-1, -2))
    # LSE_r(S) = (1/r) log( mean exp(r S) ), evaluated stably around the max.
    m = scores.amax(dim=(-1, -2))
    shifted = scores - m[..., None, None]
    return m + torch.log(torch.exp(method.r * shifted).mean(dim=(-1, -2))) / method.r


def aggregate_scores(scores: np.ndarray, method: Aggregation) -> np.ndarray:
    """Pool (C, h, w) score maps to a length-C vector."""
    t = torch.as_tensor(np.asarray(scores, dtype=np.float64))[None]
    return aggregate_scores_torch(t, method)[0].numpy()


def compute_class_priors(
    counts: Sequence[float], boundaries: ClassBoundaries | None = None
) -> np.ndarray:
    """Mean count per density class over a source population.

    Classes without members fall back to their interval midpoint (the
    unbounded top class to twice its lower bound); the zero class is always
    exactly 0.
    """
    boundaries = boundaries or ClassBoundaries()
    if len(counts) == 0:
        raise ValueError("empty source set")
    buckets: list[list[float]] = [[] for _ in range(NUM_DENSITY_CLASSES)]
    for c in counts:
        buckets[assign_density_class(c, boundaries).index].append(float(c))
    priors = np.zeros(NUM_DENSITY_CLASSES)
    for idx, (lo, hi) in enumerate(boundaries.intervals()):
        if idx == 0:
            priors[idx] = 0.0
        elif buckets[idx]:
            priors[idx] = float(np.mean(buckets[idx]))
        elif np.isinf(hi):
            priors[idx] = 2.0 * lo
        else:
            priors[idx] = 0.5 * (lo + hi)
    return priors


def generate_pseudo_gt(
    scores: np.ndarray, priors: np.ndarray, normalization: str = "softmax"
) -> np.ndarray:
    """Density map synthesized from class score maps and class priors.

    With the default normalization the per-pixel class soft-max is divided
    by the map area, so a map saturated on class c totals exactly the prior
    n(c). The 'plane-sum' alternative normalizes each class plane to unit
    sum instead.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or scores.shape[0] != NUM_DENSITY_CLASSES:
        raise ValueError(f"expected ({NUM_DENSITY_CLASSES}, h, w) score maps")
    priors = np.asarray(priors, dtype=np.float64)
    shifted = scores - scores.max(axis=0, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=0, keepdims=True)
    if normalization == "softmax":
        h, w = scores.shape[1:]
        weights = probs / (h * w)
    elif normalization == "plane-sum":
        plane_sums = probs.sum(axis=(1, 2), keepdims=True)
        weights = probs / np.maximum(plane_sums, _PROB_EPS)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return np.einsum("c,chw->hw", priors, weights)


def inject_label_noise(
    labels: Sequence[int], fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Replace exactly round(fraction * N) labels with a neighboring class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64).copy()
    n_corrupt = int(round(fraction * len(labels)))
    if n_corrupt == 0:
        return labels
    chosen = rng.choice(len(labels), size=n_corrupt, replace=False)
    for i in chosen:
        cls = labels[i]
        if cls == 0:
            labels[i] = 1
        elif cls == NUM_DENSITY_CLASSES - 1:
            labels[i] = cls - 1
        else:
            labels[i] = cls + (1 if rng.random() < 0.5 else -1)
    return labels


@dataclass
class WeakSample:
    """A patch with only an image-level density-class label."""

    image: np.ndarray        # (P, P, 3) float32
    class_index: int
    count: int               # true patch count (synthetic bookkeeping only)
    image_id: str = ""


@dataclass
class AdaptConfig:
    aggregation: Aggregation = field(default_factory=Aggregation)
    label_noise: float = 0.15
    patch_size: int = 96
    patches_per_image: int = 9
    crop_scales: tuple[float, ...] = (0.5, 0.75, 1.0)
    boundaries: ClassBoundaries = field(default_factory=ClassBoundaries)
    cam_learning_rate: float = 1e-3
    cam_iterations: int = 300
    cam_finetune_iterations: int = 200
    count_learning_rate: float = 1e-4
    count_iterations: int = 300
    batch_size: int = 8
    seed: int = 0
    finetune_groups: tuple[str, ...] = ("branch_blocks", "fusion")
    pseudo_normalization: str = "softmax"
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.patch_size % 32:
            raise ValueError("patch_size must be divisible by 32")
        bad = [g for g in self.finetune_groups if g not in CountingNetwork.GROUPS]
        if bad:
            raise ValueError(f"unknown parameter groups {bad}")
        if "backbone" in self.finetune_groups:
            raise ValueError("the backbone stays frozen during adaptation")


def make_weak_patches(
    records: list[DatasetRecord], cfg: AdaptConfig, rng: np.random.Generator
) -> list[WeakSample]:
    """Multi-scale crops resized to the patch size, labeled by patch count."""
    if not records:
        raise ValueError("empty dataset")
    p = cfg.patch_size
    samples = []
    for rec in records:
        img = rec.image.astype(np.float32)
        h, w = img.shape[:2]
        pts = rec.annotation.points
        for k in range(cfg.patches_per_image):
            scale = cfg.crop_scales[k % len(cfg.crop_scales)]
            crop = max(32, int(round(scale * p)))
            crop = min(crop, h, w)
            y0 = int(rng.integers(0, h - crop + 1))
            x0 = int(rng.integers(0, w - crop + 1))
            patch = img[y0 : y0 + crop, x0 : x0 + crop]
            if crop != p:
                t = torch.from_numpy(patch.copy()).permute(2, 0, 1)[None]
                patch = (
                    F.interpolate(t, size=(p, p), mode="bilinear", align_corners=False)[0]
                    .permute(1, 2, 0)
                    .numpy()
                )
            inside = (
                (pts[:, 0] >= x0) & (pts[:, 0] < x0 + crop)
                & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + crop)
            )
            count = int(inside.sum())
            cls = assign_density_class(count, cfg.boundaries)
            samples.append(WeakSample(patch, cls.index, count, rec.image_id))
    return samples


def _stack_weak(samples: list[WeakSample], labels: np.ndarray | None = None):
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2)
    if labels is None:
        labels = np.asarray([s.class_index for s in samples], dtype=np.int64)
    onehot = torch.zeros(len(samples), NUM_DENSITY_CLASSES)
    onehot[torch.arange(len(samples)), torch.as_tensor(labels)] = 1.0
    return images.contiguous(), onehot


def classification_loss(agg_scores: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """BCE between soft-maxed aggregated class scores and one-hot labels."""
    probs = torch.softmax(agg_scores, dim=1).clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    return F.binary_cross_entropy(probs, onehot)


def cam_train(
    model: CountingNetwork,
    samples: list[WeakSample],
    cfg: AdaptConfig,
    labels: np.ndarray | None = None,
    iterations: int | None = None,
    stage: str = "cam",
) -> list[float]:
    """Train only the class-score head; the counting network stays fixed.

    Features feeding the head are computed without gradients, and the
    optimizer holds only the head's parameters, so every other group is
    bit-identical afterwards. Returns the per-iteration losses.
    """
    if model.cam is None:
        raise RuntimeError("model was built without the class-score head")
    iterations = cfg.cam_iterations if iterations is None else iterations
    rng = np.random.default_rng(cfg.seed + 1)
    images, onehot = _stack_weak(samples, labels)
    optimizer = torch.optim.Adam(model.group_parameters("cam"), lr=cfg.cam_learning_rate)
    losses = []
    n = len(samples)
    for it in range(1, iterations + 1):
        idx = torch.from_numpy(rng.integers(0, n, size=min(cfg.batch_size, n)))
        with torch.no_grad():
            feats = model.fused_features(images[idx])
        scores = model.cam(feats)
        agg = aggregate_scores_torch(scores, cfg.aggregation)
        loss = classification_loss(agg, onehot[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss in stage {stage!r} at iteration {it}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.group_parameters("cam"), cfg.grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


def cam_accuracy(model: CountingNetwork, samples: list[WeakSample], cfg: AdaptConfig,
                 labels: np.ndarray | None = None) -> float:
    images, onehot = _stack_weak(samples, labels)
    hits = 0
    with torch.no_grad():
        for i in range(len(samples)):
            scores = model.class_scores(images[i : i + 1])
            agg = aggregate_scores_torch(scores, cfg.aggregation)
            hits += int(agg[0].argmax() == onehot[i].argmax())
    return hits / len(samples)


def _finetune_counting(
    model: CountingNetwork,
    samples: list[WeakSample],
    pseudo_maps: torch.Tensor,
    cfg: AdaptConfig,
) -> list[float]:
    """Fine-tune the selected groups against pseudo ground truth."""
    rng = np.random.default_rng(cfg.seed + 2)
    images, _ = _stack_weak(samples)
    params = [p for g in cfg.finetune_groups for p in model.group_parameters(g)]
    optimizer = torch.optim.Adam(params, lr=cfg.count_learning_rate)
    losses = []
    n = len(samples)
    for it in range(1, cfg.count_iterations + 1):
        idx = torch.from_numpy(rng.integers(0, n, size=min(cfg.batch_size, n)))
        with torch.no_grad():
            taps = model.backbone(images[idx])
        f3, f4, f5, *_ = model.attend(*taps)
        fused = model._fuse(f3, f4, f5, images.shape[-2:])
        pred = model.fusion(fused)
        loss = density_loss(pred, pseudo_maps[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss in stage 'finetune' at iteration {it}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


@dataclass
class AdaptResult:
    model: CountingNetwork
    priors: np.ndarray
    stage_losses: dict[str, list[float]]
    target_labels: np.ndarray


def adapt(
    model: CountingNetwork,
    source_records: list[DatasetRecord],
    target_records: list[DatasetRecord],
    cfg: AdaptConfig,
) -> AdaptResult:
    """Three-stage weakly supervised adaptation of a pre-trained model.

    1. Train the class-score head on source patches (labels from counts).
    2. Fine-tune the head on target patches whose labels carry the
       configured fraction of neighboring-class noise.
    3. Fine-tune the counting branches on pseudo ground truth synthesized
       from the target score maps and source class priors.

    The backbone (and attention modules, unless reconfigured) are never
    updated.
    """
    rng = np.random.default_rng(cfg.seed)
    source_patches = make_weak_patches(source_records, cfg, rng)
    target_patches = make_weak_patches(target_records, cfg, rng)

    priors = compute_class_priors([s.count for s in source_patches], cfg.boundaries)
    target_labels = inject_label_noise(
        [s.class_index for s in target_patches], cfg.label_noise, rng
    )

    logs = {}
    logs["cam_source"] = cam_train(
        model, source_patches, cfg, iterations=cfg.cam_iterations, stage="cam_source"
    )
    logs["cam_target"] = cam_train(
        model,
        target_patches,
        cfg,
        labels=target_labels,
        iterations=cfg.cam_finetune_iterations,
        stage="cam_target",
    )

    images, _ = _stack_weak(target_patches)
    pseudo = []
    with torch.no_grad():
        for i in range(len(target_patches)):
            scores = model.class_scores(images[i : i + 1])[0].numpy()
            pseudo.append(
                generate_pseudo_gt(scores, priors, cfg.pseudo_normalization).astype(np.float32)
            )
    pseudo_maps = torch.from_numpy(np.stack(pseudo))[:, None]

    logs["finetune"] = _finetune_counting(model, target_patches, pseudo_maps, cfg)
    return AdaptResult(model, priors, logs, target_labels)
