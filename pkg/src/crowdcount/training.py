"""Supervised training: losses, patch extraction, augmentation, optimization.

The loss couples a density term (squared L2 distance between predicted and
ground-truth maps, batch-averaged) with a pixel-wise binary cross-entropy
term supervising the spatial attention logits. Training patches are cropped
from the full-image density map so mass leaking across crop borders is kept
rather than regenerated.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .density import (
    DEFAULT_SEG_THRESHOLD,
    DEFAULT_SIGMA,
    ClassBoundaries,
    DensityMap,
    assign_density_class,
    derive_segmentation_mask,
    downsample_density_map,
    generate_density_map,
)
from .model import CountingNetwork, ModelConfig, build_model, save_checkpoint
from .synthdata import DatasetRecord


class TrainingDivergence(RuntimeError):
    """Non-finite loss encountered during optimization."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    momentum: float = 0.9          # Adam first-moment decay
    batch_size: int = 4
    iterations: int = 1000
    seg_loss_weight: float = 1.0
    patch_size: int = 224
    patches_per_image: int = 9
    val_fraction: float = 0.10
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    seg_threshold: float = DEFAULT_SEG_THRESHOLD
    flip: bool = True
    noise_std: float = 0.01
    val_every: int = 50
    grad_clip: float = 10.0
    squared_loss: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("val_fraction must be in [0, 0.5]")
        if self.patch_size % 32:
            raise ValueError("patch_size must be divisible by 32")


def save_train_config(path, cfg: TrainConfig) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_train_config(path) -> TrainConfig:
    """Parse a flat key-value file; keys must be TrainConfig field names."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kind = fields[key]
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"{path}:{lineno}: {key} must be true or false")
            kwargs[key] = raw.lower() == "true"
        elif kind == "int":
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return TrainConfig(**kwargs)


def density_loss(pred: torch.Tensor, gt: torch.Tensor, squared: bool = True) -> torch.Tensor:
    """Batch mean of the (squared) L2 distance between density maps."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    sq = ((pred - gt) ** 2).flatten(1).sum(dim=1)
    if squared:
        return sq.mean()
    return torch.sqrt(sq).mean()


def segmentation_loss(seg_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy, sigmoid applied to the logits."""
    if seg_logits.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {tuple(seg_logits.shape)} vs {tuple(gt_mask.shape)}")
    return F.binary_cross_entropy_with_logits(seg_logits, gt_mask.to(seg_logits.dtype))


def total_loss(pred, gt_dmap, seg_logits, gt_mask, seg_weight: float,
               squared: bool = True) -> tuple[torch.Tensor, float, float]:
    """Density term plus weighted segmentation term.

    Returns (loss tensor, density component, segmentation component); the
    segmentation component is 0 when no logits are supplied.
    """
    d = density_loss(pred, gt_dmap, squared=squared)
    if seg_logits is None or seg_weight == 0.0:
        return d, float(d.detach()), 0.0
    s = segmentation_loss(seg_logits, gt_mask)
    return d + seg_weight * s, float(d.detach()), float(s.detach())


@dataclass
class TrainSample:
    image: np.ndarray        # (P, P, 3) float32
    density: np.ndarray      # (P/4, P/4) float32, scale 4
    mask: np.ndarray         # (P/4, P/4) uint8
    class_index: int
    image_id: str = ""
    origin: tuple[int, int] = (0, 0)
    flipped: bool = False


def _pad_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = max(0, h - arr.shape[0]), max(0, w - arr.shape[1])
    if not (ph or pw):
        return arr
    widths = ((0, ph), (0, pw)) + ((0, 0),) * (arr.ndim - 2)
    return np.pad(arr, widths)


def make_training_patches(
    records: list[DatasetRecord],
    cfg: TrainConfig,
    rng: np.random.Generator,
    boundaries: ClassBoundaries | None = None,
) -> list[TrainSample]:
    """Random crops with full supervision, horizontal flips, and image noise.

    The ground-truth patch is cut from the precomputed full-image density
    map, then sum-pooled to the network's stride-4 output resolution. All
    randomness comes from the supplied generator.
    """
    if not records:
        raise ValueError("empty dataset")
    boundaries = boundaries or ClassBoundaries()
    p = cfg.patch_size
    samples = []
    for rec in records:
        dmap = generate_density_map(rec.annotation, cfg.sigma)
        image = _pad_to(rec.image.astype(np.float32), p, p)
        density = _pad_to(dmap.values, p, p)
        h, w = image.shape[:2]
        pts = rec.annotation.points
        for _ in range(cfg.patches_per_image):
            y0 = int(rng.integers(0, h - p + 1))
            x0 = int(rng.integers(0, w - p + 1))
            img_patch = image[y0 : y0 + p, x0 : x0 + p].copy()
            den_patch = density[y0 : y0 + p, x0 : x0 + p]
            den_small = downsample_density_map(DensityMap(den_patch), 4)
            mask_small = derive_segmentation_mask(den_small, cfg.seg_threshold)
            inside = (
                (pts[:, 0] >= x0) & (pts[:, 0] < x0 + p)
                & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + p)
            )
            cls = assign_density_class(int(inside.sum()), boundaries)

            den_values = den_small.values.astype(np.float32)
            mask_values = mask_small.values
            flipped = bool(cfg.flip and rng.random() < 0.5)
            if flipped:
                img_patch = img_patch[:, ::-1].copy()
                den_values = den_values[:, ::-1].copy()
                mask_values = mask_values[:, ::-1].copy()
            if cfg.noise_std > 0:
                img_patch = img_patch + rng.normal(0.0, cfg.noise_std, img_patch.shape).astype(
                    np.float32
                )
            samples.append(
                TrainSample(
                    image=img_patch,
                    density=den_values,
                    mask=mask_values,
                    class_index=cls.index,
                    image_id=rec.image_id,
                    origin=(x0, y0),
                    flipped=flipped,
                )
            )
    return samples


def split_validation(
    records: list[DatasetRecord], val_fraction: float, rng: np.random.Generator
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Image-level train/validation split."""
    n_val = int(round(len(records) * val_fraction))
    order = rng.permutation(len(records))
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def _stack_samples(samples: list[TrainSample]):
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2)
    density = torch.from_numpy(np.stack([s.density for s in samples]))[:, None]
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    return images.contiguous(), density, masks


@dataclass
class HistoryRow:
    iteration: int
    density_loss: float
    seg_loss: float
    total_loss: float
    val_mae: float | None = None


def write_history_csv(path, history: list[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "density_loss", "seg_loss", "total_loss", "val_mae"])
        for row in history:
            writer.writerow(
                [
                    row.iteration,
                    f"{row.density_loss:.8g}",
                    f"{row.seg_loss:.8g}",
                    f"{row.total_loss:.8g}",
                    "" if row.val_mae is None else f"{row.val_mae:.8g}",
                ]
            )


@dataclass
class TrainResult:
    model: CountingNetwork
    history: list[HistoryRow]
    best_val_mae: float | None = None
    best_state: dict | None = None
    val_image_ids: list[str] = field(default_factory=list)

    def best_model(self) -> CountingNetwork:
        """The model restored to its best-validation-MAE parameters.

        Falls back to the final parameters when no validation ran.
        """
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.model


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    records: list[DatasetRecord],
    out_dir=None,
) -> TrainResult:
    """Optimize the network on a dataset with Adam.

    Deterministic for a fixed seed. Writes checkpoint.pt (best validation
    MAE, or final when no validation split) and history.csv when ``out_dir``
    is given. Raises TrainingDivergence on non-finite loss.
    """
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    model = build_model(model_config, seed=cfg.seed)

    train_records, val_records = split_validation(records, cfg.val_fraction, rng)
    if not train_records:
        raise ValueError("no training images left after validation split")
    samples = make_training_patches(train_records, cfg, rng)
    images, density, masks = _stack_samples(samples)

    use_seg = model_config.enable_sam and model_config.sam_supervised
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.momentum, 0.999)
    )

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[HistoryRow] = []
    best_val = None
    best_state = None
    n = len(samples)
    full_batch = cfg.batch_size >= n
    for it in range(1, cfg.iterations + 1):
        if full_batch:
            idx = torch.arange(n)
        else:
            idx = torch.from_numpy(rng.integers(0, n, size=cfg.batch_size))
        out_net = model(images[idx])
        loss, d_val, s_val = total_loss(
            out_net.density,
            density[idx],
            out_net.seg_logits if use_seg else None,
            masks[idx],
            cfg.seg_loss_weight,
            squared=cfg.squared_loss,
        )
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at iteration {it}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        row = HistoryRow(it, d_val, s_val, float(loss.detach()))
        if val_records and (it % cfg.val_every == 0 or it == cfg.iterations):
            row.val_mae = _validate(model, val_records)
            if best_val is None or row.val_mae < best_val:
                best_val = row.val_mae
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out is not None:
                    save_checkpoint(out / "checkpoint.pt", model)
        history.append(row)

    if out is not None:
        if best_val is None:
            save_checkpoint(out / "checkpoint.pt", model)
        write_history_csv(out / "history.csv", history)
    return TrainResult(model, history, best_val, best_state, [r.image_id for r in val_records])


def _validate(model: CountingNetwork, records: list[DatasetRecord]) -> float:
    results = evaluation.evaluate_dataset(model, records)
    return evaluation.mae(results)
