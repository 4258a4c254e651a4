"""Source reference centroids: k-means++ seeding followed by Lloyd iterations."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataError
from .projection import LatentVector

DEFAULT_K = 5


@dataclass
class ReferenceSet:
    centroids: np.ndarray  # K x L
    inertia: float
    iterations_run: int
    objective_trace: list[float] = field(default_factory=list)
    seed: int = 0
    pool_k: int = 0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _stack_valid(vectors: Sequence[LatentVector]) -> np.ndarray:
    valid = [v.values for v in vectors if v.valid]
    if not valid:
        raise DataError("no valid latent vectors")
    lengths = {len(v) for v in valid}
    if len(lengths) != 1:
        raise DataError(f"latent vectors have different lengths: {sorted(lengths)}")
    return np.asarray(valid, dtype=np.float64)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion,
    # which loses the exact zero for coincident points
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    closest = _sq_dists(x, np.asarray(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.asarray(centers)


def _objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans_fit(
    vectors: Sequence[LatentVector],
    K: int = DEFAULT_K,
    seed: int = 0,
    max_iters: int = 300,
    tol: float = 1e-6,
) -> ReferenceSet:
    """Cluster the valid latent vectors into K groups.

    ``objective_trace`` holds the within-cluster sum of squares after each
    Lloyd iteration; it never increases.
    """
    x = _stack_valid(vectors)
    if K < 1 or len(x) < K:
        raise DataError(f"need at least K={K} valid vectors, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, K, rng)
    trace = []
    it = 0
    for it in range(1, max_iters + 1):
        labels = _sq_dists(x, centroids).argmin(axis=1)
        new = np.empty_like(centroids)
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = x[members].mean(axis=0)
            else:
                new[k] = centroids[k]
        for k in range(K):
            if not (labels == k).any():
                # reseed with the point farthest from its own centroid
                err = ((x - new[labels]) ** 2).sum(axis=1)
                far = int(err.argmax())
                old = labels[far]
                labels[far] = k
                new[k] = x[far]
                if (labels == old).any():
                    new[old] = x[labels == old].mean(axis=0)
        shift = float(np.abs(new - centroids).max())
        centroids = new
        trace.append(_objective(x, centroids, labels))
        if shift < tol:
            break
    labels = _sq_dists(x, centroids).argmin(axis=1)
    return ReferenceSet(centroids, _objective(x, centroids, labels), it, trace, seed)


def assign(v: LatentVector, refs: ReferenceSet) -> int:
    if not v.valid:
        raise DataError(f"latent vector {v.sample_id!r} is invalid")
    if len(v) != refs.centroids.shape[1]:
        raise DataError(f"vector length {len(v)} != centroid length {refs.centroids.shape[1]}")
    return int(_sq_dists(np.asarray(v.values)[None], refs.centroids)[0].argmin())


def save_references(refs: ReferenceSet, csv_path, pool_k: int) -> Path:
    """Write centroids as CSV plus a JSON sidecar next to it."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in refs.centroids:
            writer.writerow([repr(float(v)) for v in row])
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"K": refs.K, "pool_k": pool_k, "inertia": refs.inertia, "seed": refs.seed}, indent=1)
    )
    return sidecar


def load_references(csv_path) -> ReferenceSet:
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(".json")
    if not csv_path.is_file() or not sidecar.is_file():
        raise DataError(f"reference file or sidecar missing for {csv_path}")
    with open(csv_path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    meta = json.loads(sidecar.read_text())
    centroids = np.asarray(rows, dtype=np.float64)
    if centroids.shape[0] != meta["K"]:
        raise DataError(f"{csv_path}: {centroids.shape[0]} rows but sidecar says K={meta['K']}")
    return ReferenceSet(centroids, float(meta["inertia"]), 0, [], int(meta["seed"]), int(meta["pool_k"]))
