"""Mask-weighted latent projection of penultimate features."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, DataError
from .segmenter import Prediction, SegmenterParams, predict_dataset

DEFAULT_POOL_K = 8


@dataclass(frozen=True)
class LatentVector:
    values: np.ndarray
    sample_id: str = ""
    valid: bool = True

    def __len__(self) -> int:
        return len(self.values)


def project_features(penultimate: np.ndarray, mask: np.ndarray, pool_k: int) -> tuple[np.ndarray, bool]:
    """Mask the features, average over channels, max-pool, flatten, divide by foreground size."""
    c, h, w = penultimate.shape
    if pool_k < 1 or h % pool_k or w % pool_k:
        raise DataError(f"feature map {h}x{w} is not divisible by pool_k={pool_k}")
    if mask.shape != (h, w):
        raise DataError(f"mask shape {mask.shape} does not match features {(h, w)}")
    n_fg = int(np.count_nonzero(mask))
    length = (h // pool_k) * (w // pool_k)
    if n_fg == 0:
        return np.zeros(length), False
    masked = penultimate * mask[None, :, :]
    channel_mean = masked.mean(axis=0)
    pooled = channel_mean.reshape(h // pool_k, pool_k, w // pool_k, pool_k).max(axis=(1, 3))
    return pooled.ravel() / n_fg, True


def project(pred: Prediction, pool_k: int = DEFAULT_POOL_K, sample_id: str = "") -> LatentVector:
    values, valid = project_features(pred.penultimate, pred.mask, pool_k)
    return LatentVector(values, sample_id, valid)


def project_dataset(params: SegmenterParams, ds: Dataset, pool_k: int = DEFAULT_POOL_K) -> list[LatentVector]:
    """One latent vector per sample, in dataset order. ``params`` is only read."""
    preds = predict_dataset(params, ds)
    return [project(p, pool_k, s.id) for p, s in zip(preds, ds)]


def write_latents_csv(vectors: Sequence[LatentVector], path) -> None:
    length = len(vectors[0]) if vectors else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "valid"] + [f"v_{i}" for i in range(length)])
        for v in vectors:
            writer.writerow([v.sample_id, int(v.valid)] + [repr(float(x)) for x in v.values])


def read_latents_csv(path) -> list[LatentVector]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.append(LatentVector(np.array([float(x) for x in row[2:]]), row[0], row[1] == "1"))
    return out
