"""Count-error metrics, whole-image inference, and reporting harnesses.

MAE is the mean absolute count error. MSE follows the counting-benchmark
convention of a root-mean-square count error (the square root of the mean
squared error) so numbers are comparable with published tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .density import DensityMap
from .model import CountingNetwork
from .synthdata import DatasetRecord


class CountResult(NamedTuple):
    image_id: str
    gt_count: float
    pred_count: float


def count_from_density(dmap: DensityMap | np.ndarray) -> float:
    values = dmap.values if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(values.sum())


def mae(results: Sequence[CountResult]) -> float:
    if not results:
        raise ValueError("empty result set")
    return float(np.mean([abs(r.gt_count - r.pred_count) for r in results]))


def mse(results: Sequence[CountResult]) -> float:
    """Root of the mean squared count error."""
    if not results:
        raise ValueError("empty result set")
    return float(math.sqrt(np.mean([(r.gt_count - r.pred_count) ** 2 for r in results])))


def _pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return image
    widths = ((0, ph), (0, pw)) + ((0, 0),) * (image.ndim - 2)
    # Reflect padding avoids spurious border density; tiny images fall back
    # to edge replication (reflect needs pad < size).
    if ph < h and pw < w:
        return np.pad(image, widths, mode="reflect")
    return np.pad(image, widths, mode="edge")


def infer_full_image(model: CountingNetwork, image: np.ndarray) -> tuple[DensityMap, float]:
    """Forward one whole image of arbitrary size.

    The image is reflect-padded to a multiple of 32, the stride-4 output is
    cropped back to ceil(H/4) x ceil(W/4), and the count sums only that
    valid region, so padding mass never enters the estimate.
    """
    h, w = image.shape[:2]
    padded = _pad_to_multiple(image.astype(np.float32))
    x = torch.from_numpy(padded).permute(2, 0, 1)[None]
    with torch.no_grad():
        density = model(x).density[0, 0].numpy()
    valid = density[: math.ceil(h / 4), : math.ceil(w / 4)]
    dmap = DensityMap(valid.astype(np.float64), scale=4)
    return dmap, dmap.count


def evaluate_dataset(model: CountingNetwork, records: list[DatasetRecord]) -> list[CountResult]:
    results = []
    for rec in records:
        _, pred = infer_full_image(model, rec.image)
        results.append(CountResult(rec.image_id, float(rec.annotation.count), pred))
    return results


@dataclass
class DensityBin:
    low: float
    high: float
    n_images: int
    mae: float | None


def density_level_report(
    results: Sequence[CountResult], bin_edges: Sequence[float]
) -> list[DensityBin]:
    """Per-bin MAE with images assigned by ground-truth count.

    ``bin_edges`` are strictly increasing; bins are [e_i, e_{i+1}) with the
    last bin closed on the right. Empty bins report an absent MAE.
    """
    edges = [float(e) for e in bin_edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing with at least two entries")
    bins = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        members = [
            r for r in results if lo <= r.gt_count < hi or (last and r.gt_count == hi)
        ]
        bins.append(
            DensityBin(lo, hi, len(members), mae(members) if members else None)
        )
    return bins


def quantile_bin_edges(results: Sequence[CountResult], n_bins: int = 5) -> list[float]:
    """Default density-level bins: quantiles of the ground-truth counts."""
    counts = np.asarray([r.gt_count for r in results], dtype=np.float64)
    qs = np.quantile(counts, np.linspace(0, 1, n_bins + 1))
    edges = [float(qs[0])]
    for q in qs[1:]:
        edges.append(max(float(q), edges[-1] + 1e-9))
    return edges


@dataclass
class EvalReport:
    mae: float
    mse: float
    n_images: int
    per_bin: list[DensityBin]
    config: dict | None = None


def build_report(results: Sequence[CountResult], bins: list[DensityBin],
                 config: dict | None = None) -> EvalReport:
    return EvalReport(mae(results), mse(results), len(results), bins, config)


@dataclass
class CrossDatasetReport:
    """S/NS/C triple per metric.

    NS: source-trained model tested on the target set. S: target-trained
    model tested on the target set. C = NS - S, the generalization drop.
    """

    mae_ns: float
    mse_ns: float
    mae_s: float | None = None
    mse_s: float | None = None

    @property
    def mae_c(self) -> float | None:
        return None if self.mae_s is None else self.mae_ns - self.mae_s

    @property
    def mse_c(self) -> float | None:
        return None if self.mse_s is None else self.mse_ns - self.mse_s


def cross_dataset_eval(
    source_model: CountingNetwork,
    target_model: CountingNetwork | None,
    target_records: list[DatasetRecord],
    require_target: bool = False,
) -> CrossDatasetReport:
    if require_target and target_model is None:
        raise ValueError("S and C require a target-trained model")
    ns = evaluate_dataset(source_model, target_records)
    report = CrossDatasetReport(mae_ns=mae(ns), mse_ns=mse(ns))
    if target_model is not None:
        s = evaluate_dataset(target_model, target_records)
        report.mae_s = mae(s)
        report.mse_s = mse(s)
    return report


def write_report_json(path, results: Sequence[CountResult], bins: list[DensityBin],
                      config: dict | None = None,
                      cross: CrossDatasetReport | None = None) -> None:
    payload = {
        "mae": mae(results),
        "mse": mse(results),
        "n_images": len(results),
        "per_bin": [
            {"low": b.low, "high": b.high, "n_images": b.n_images, "mae": b.mae}
            for b in bins
        ],
    }
    if config is not None:
        payload["config"] = config
    if cross is not None:
        payload["cross_dataset"] = {
            "mae": {"S": cross.mae_s, "NS": cross.mae_ns, "C": cross.mae_c},
            "mse": {"S": cross.mse_s, "NS": cross.mse_ns, "C": cross.mse_c},
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def write_bins_csv(path, bins: list[DensityBin]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["low", "high", "n_images", "mae"])
        for b in bins:
            writer.writerow(
                [f"{b.low:.8g}", f"{b.high:.8g}", b.n_images,
                 "" if b.mae is None else f"{b.mae:.8g}"]
            )
