"""Active sample selection: dual-reference (STDR) and its single-sided and baseline variants."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DataError
from .projection import LatentVector
from .reference import ReferenceSet, _sq_dists
from .segmenter import Prediction

STRATEGIES = ("stdr", "alpha", "beta", "random", "entropy")


@dataclass(frozen=True)
class SimilarityScore:
    sample_id: str
    distance: float
    valid: bool = True


@dataclass
class SelectionManifest:
    """Ids chosen for annotation.

    ``invariant_ids`` are the source-like picks, ``specific_ids`` the
    least source-like. Strategies without roles (random, entropy) list their
    picks under ``specific_ids``.
    """

    strategy: str
    budget_percent: float
    invariant_ids: list[str] = field(default_factory=list)
    specific_ids: list[str] = field(default_factory=list)
    seed: Optional[int] = None

    @property
    def all_ids(self) -> list[str]:
        return list(self.invariant_ids) + list(self.specific_ids)

    def __len__(self) -> int:
        return len(self.invariant_ids) + len(self.specific_ids)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget_percent": self.budget_percent,
            "seed": self.seed,
            "invariant_ids": list(self.invariant_ids),
            "specific_ids": list(self.specific_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionManifest":
        return cls(d["strategy"], float(d["budget_percent"]), list(d["invariant_ids"]),
                   list(d["specific_ids"]), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SelectionManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def budget_count(budget_percent: float, n_total: int, minimum: int = 1) -> int:
    """Round-half-up of budget_percent % of n_total, at least ``minimum``."""
    if not 0 < budget_percent <= 100:
        raise ValueError(f"budget_percent must be in (0, 100], got {budget_percent}")
    m = math.floor(budget_percent / 100.0 * n_total + 0.5 + 1e-9)
    m = max(m, minimum)
    if m > n_total:
        raise DataError(f"budget of {m} samples exceeds dataset size {n_total}")
    return m


def similarity_scores(vectors: Sequence[LatentVector], refs: ReferenceSet) -> list[SimilarityScore]:
    """Squared distance from each vector to its nearest reference centroid."""
    out = []
    length = refs.centroids.shape[1]
    for v in vectors:
        if len(v) != length:
            raise DataError(f"vector {v.sample_id!r} has length {len(v)}, centroids have {length}")
        if not v.valid:
            out.append(SimilarityScore(v.sample_id, math.inf, False))
            continue
        d = _sq_dists(np.asarray(v.values)[None], refs.centroids)[0]
        out.append(SimilarityScore(v.sample_id, float(d.min()), True))
    return out


def _ascending(scores: Sequence[SimilarityScore]) -> list[str]:
    return [s.sample_id for s in sorted(scores, key=lambda s: (s.distance if s.valid else math.inf, s.sample_id))]


def _descending(scores: Sequence[SimilarityScore]) -> list[str]:
    return [s.sample_id for s in sorted(scores, key=lambda s: (-(s.distance if s.valid else math.inf), s.sample_id))]


def _require_valid(scores: Sequence[SimilarityScore], at_least: int) -> None:
    n_valid = sum(1 for s in scores if s.valid)
    if n_valid == 0 or n_valid < at_least:
        raise DataError(f"need at least {max(at_least, 1)} valid similarity scores, got {n_valid}")


def select_stdr(scores: Sequence[SimilarityScore], budget_percent: float, seed: Optional[int] = None) -> SelectionManifest:
    """Half the budget to the most source-like samples, the rest to the least.

    An odd budget gives the extra sample to the least source-like half.
    ``seed`` is recorded only; the selection itself is deterministic.
    """
    _require_valid(scores, 2)
    m = budget_count(budget_percent, len(scores), minimum=2)
    m_inv = m // 2
    invariant = _ascending(scores)[:m_inv]
    taken = set(invariant)
    specific = [i for i in _descending(scores) if i not in taken][: m - m_inv]
    return SelectionManifest("stdr", budget_percent, invariant, specific, seed)


def select_alpha(scores: Sequence[SimilarityScore], budget_percent: float) -> SelectionManifest:
    _require_valid(scores, 1)
    m = budget_count(budget_percent, len(scores))
    return SelectionManifest("alpha", budget_percent, _ascending(scores)[:m], [])


def select_beta(scores: Sequence[SimilarityScore], budget_percent: float) -> SelectionManifest:
    _require_valid(scores, 1)
    m = budget_count(budget_percent, len(scores))
    return SelectionManifest("beta", budget_percent, [], _descending(scores)[:m])


def select_random(ids: Sequence[str], budget_percent: float, seed: int) -> SelectionManifest:
    m = budget_count(budget_percent, len(ids))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=m, replace=False)
    return SelectionManifest("random", budget_percent, [], [ids[int(i)] for i in picked], seed)


def mean_entropy(probs: np.ndarray) -> float:
    """Mean per-pixel Shannon entropy (nats) of a class-first probability grid."""
    p = np.asarray(probs, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-plogp.sum(axis=0).mean())


def select_entropy(preds: Sequence[Prediction], ids: Sequence[str], budget_percent: float) -> SelectionManifest:
    if len(preds) != len(ids) or any(p is None for p in preds):
        raise DataError("a prediction is required for every sample id")
    m = budget_count(budget_percent, len(ids))
    scores = [(mean_entropy(p.probs), i) for p, i in zip(preds, ids)]
    ranked = sorted(scores, key=lambda t: (-t[0], t[1]))
    return SelectionManifest("entropy", budget_percent, [], [i for _, i in ranked[:m]])
