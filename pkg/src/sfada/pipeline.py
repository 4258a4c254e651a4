"""Source training, reference derivation, selection and three-stage adaptation.

The adaptation entry point :func:`adapt` never sees source data: it receives
the frozen source checkpoint and the reference centroids only.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, DataError, Sample, SplitSpec, prepare_dataset, split_dataset
from .metrics import METRICS_CSV_COLUMNS, MetricResult, MetricSummary, evaluate_dataset, summary_row
from .projection import project_dataset
from .reference import ReferenceSet, kmeans_fit
from .segmenter import SegmenterParams, TrainConfig, init_params, predict_dataset, train
from .selection import (
    STRATEGIES, SelectionManifest, select_alpha, select_beta, select_entropy, select_random,
    select_stdr, similarity_scores,
)


@dataclass(frozen=True)
class AdaptationConfig:
    budget_percent: float = 20.0
    strategy: str = "stdr"
    K: int = 5
    pool_k: int = 8
    stage1_iters: int = 1000
    stage3_iters: int = 1000
    seed: int = 0
    semi_enabled: bool = True
    source_iters: int = 2000
    batch_size: int = 8
    lr0: float = 0.03
    decay_power: float = 0.9
    resolution: int = 64
    eval_every: int = 100
    augment: bool = True
    precision: str = "float32"
    kmeans_max_iters: int = 300
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if min(self.stage1_iters, self.stage3_iters, self.source_iters) < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0 < self.budget_percent <= 100:
            raise ValueError(f"budget_percent must be in (0, 100], got {self.budget_percent}")
        if self.K < 1 or self.pool_k < 1:
            raise ValueError("K and pool_k must be positive")
        if self.resolution % 4 or self.resolution % self.pool_k:
            raise ValueError("resolution must be divisible by 4 and by pool_k")

    def train_config(self, iterations: int, stage: int, n_samples: int) -> TrainConfig:
        return TrainConfig(
            iterations=iterations,
            batch_size=min(self.batch_size, n_samples),
            lr0=self.lr0,
            decay_power=self.decay_power,
            seed=self.seed * 100 + stage,
            augment=self.augment,
            precision=self.precision,
        )


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.cause = exc


class LabelOracle:
    """Stands in for the annotator: hands out ground truth only on request and counts every mask read."""

    def __init__(self, ds: Dataset):
        self._truth = {s.id: s.truth for s in ds}
        self.revealed: list[str] = []

    def reveal(self, ids: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for i in ids:
            truth = self._truth.get(i)
            if truth is None:
                raise DataError(f"no annotation available for sample {i!r}")
            self.revealed.append(i)
            out[i] = truth
        return out


def _split(ds: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    return split_dataset(ds, SplitSpec(0.7, 0.1, 0.2, seed))


def mean_dsc(params: SegmenterParams, ds: Dataset) -> float:
    preds = predict_dataset(params, ds)
    _, summary = evaluate_dataset([p.mask for p in preds], [s.truth for s in ds])
    return summary.dsc_mean


def evaluate_params(params: SegmenterParams, ds: Dataset) -> tuple[list[MetricResult], MetricSummary]:
    preds = predict_dataset(params, ds)
    return evaluate_dataset([p.mask for p in preds], [s.truth for s in ds])


@dataclass
class SourcePhaseResult:
    params: SegmenterParams
    refs: ReferenceSet
    loss_trace: list[float]
    val_history: list[tuple[int, float]]
    best_step: int
    test_split: Dataset
    seconds: float


def run_source_phase(source_ds: Dataset, cfg: AdaptationConfig) -> SourcePhaseResult:
    """Train on the source train split, keep the best-validation checkpoint, fit references."""
    t0 = time.perf_counter()
    prepared = prepare_dataset(source_ds, cfg.resolution)
    train_ds, val_ds, test_ds = _split(prepared, cfg.seed)
    history: list[tuple[int, float]] = []
    best: dict = {}

    def track(step: int, params: SegmenterParams) -> None:
        score = mean_dsc(params, val_ds)
        history.append((step, score))
        if not best or score > best["score"]:
            best.update(score=score, step=step, params=params.copy())

    tcfg = cfg.train_config(cfg.source_iters, 0, len(train_ds))
    _, trace = train(init_params(cfg.seed), train_ds, tcfg, callback=track, callback_every=cfg.eval_every)
    params = best["params"]
    latents = project_dataset(params, train_ds, cfg.pool_k)
    refs = kmeans_fit(latents, cfg.K, cfg.seed, cfg.kmeans_max_iters, cfg.kmeans_tol)
    refs.pool_k = cfg.pool_k
    return SourcePhaseResult(params, refs, trace, history, best["step"], test_ds, time.perf_counter() - t0)


def select_samples(
    params: SegmenterParams, refs: ReferenceSet, unlabeled: Dataset, cfg: AdaptationConfig
) -> SelectionManifest:
    """Choose target samples for annotation with the frozen source model."""
    strategy = cfg.strategy
    if strategy == "random":
        return select_random(unlabeled.ids, cfg.budget_percent, cfg.seed)
    if strategy == "entropy":
        m = select_entropy(predict_dataset(params, unlabeled), unlabeled.ids, cfg.budget_percent)
        m.seed = cfg.seed
        return m
    if refs.centroids.shape[1] != (cfg.resolution // cfg.pool_k) ** 2:
        raise DataError("reference centroid length does not match resolution/pool_k")
    scores = similarity_scores(project_dataset(params, unlabeled, cfg.pool_k), refs)
    if strategy == "stdr":
        return select_stdr(scores, cfg.budget_percent, cfg.seed)
    m = select_alpha(scores, cfg.budget_percent) if strategy == "alpha" else select_beta(scores, cfg.budget_percent)
    m.seed = cfg.seed
    return m


def _labeled_dataset(unlabeled: Dataset, truths: dict[str, np.ndarray], ids: Sequence[str], name: str) -> Dataset:
    return Dataset(tuple(replace(unlabeled.by_id(i), truth=truths[i]) for i in ids), name)


def stage1_finetune(
    params: SegmenterParams, target_ds: Dataset, manifest: SelectionManifest, cfg: AdaptationConfig
) -> tuple[SegmenterParams, list[float]]:
    """Supervised fine-tuning on the annotated samples only; ``target_ds`` must carry their truths."""
    chosen = set(manifest.all_ids)
    if not chosen:
        raise DataError("selection manifest is empty")
    missing = chosen - set(target_ds.ids)
    if missing:
        raise DataError(f"manifest sample {sorted(missing)[0]!r} is not in the target dataset")
    # dataset order, not manifest order, so the result depends only on which samples were picked
    labeled = target_ds.subset([i for i in target_ds.ids if i in chosen], "labeled")
    unlabeled = [s.id for s in labeled if s.truth is None]
    if unlabeled:
        raise DataError(f"manifest sample {unlabeled[0]!r} has no revealed annotation")
    return train(params, labeled, cfg.train_config(cfg.stage1_iters, 1, len(labeled)))


def stage2_pseudolabel(params: SegmenterParams, target_unlabeled: Dataset) -> list[tuple[str, np.ndarray]]:
    preds = predict_dataset(params, target_unlabeled)
    return [(s.id, p.mask) for s, p in zip(target_unlabeled, preds)]


def stage3_joint(
    params: SegmenterParams,
    labeled: Dataset,
    pseudo: Sequence[tuple[str, np.ndarray]],
    images: Dataset,
    cfg: AdaptationConfig,
) -> tuple[SegmenterParams, list[float]]:
    """Fine-tune on annotated samples plus pseudo-labelled ones with the same loss.

    ``images`` supplies the pixels for the pseudo-labelled ids.
    """
    labeled_ids = set(labeled.ids)
    overlap = [i for i, _ in pseudo if i in labeled_ids]
    if overlap:
        raise DataError(f"sample {overlap[0]!r} is both annotated and pseudo-labelled")
    pseudo_samples = tuple(replace(images.by_id(i), truth=m) for i, m in pseudo)
    pool = Dataset(tuple(labeled) + pseudo_samples, "joint")
    return train(params, pool, cfg.train_config(cfg.stage3_iters, 3, len(pool)))


@dataclass
class RunReport:
    config: dict
    manifest: Optional[SelectionManifest]
    checkpoints: dict[str, SegmenterParams] = field(default_factory=dict)
    summaries: dict[str, MetricSummary] = field(default_factory=dict)
    per_sample: dict[str, list[MetricResult]] = field(default_factory=dict)
    loss_traces: dict[str, list[float]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    labels_read: int = 0
    source_test: Optional[MetricSummary] = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "manifest": self.manifest.to_dict() if self.manifest else None,
            "checkpoints": sorted(self.checkpoints),
            "summaries": {k: v.to_dict() for k, v in self.summaries.items()},
            "per_sample": {k: [asdict(r) for r in v] for k, v in self.per_sample.items()},
            "loss_traces": self.loss_traces,
            "seconds": self.seconds,
            "labels_read": self.labels_read,
            "source_test": self.source_test.to_dict() if self.source_test else None,
        }

    def metrics_rows(self) -> list[list[str]]:
        return [summary_row(k, v) for k, v in self.summaries.items()]

    def write(self, out_dir) -> None:
        from .segmenter import save_checkpoint

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1))
        write_metrics_csv(self.metrics_rows(), out / "metrics.csv")
        if self.manifest:
            self.manifest.save(out / "manifest.json")
        for name, params in self.checkpoints.items():
            save_checkpoint(params, out / f"{name}.ckpt")


def write_metrics_csv(rows: Sequence[Sequence[str]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_CSV_COLUMNS)
        writer.writerows(rows)


def adapt(
    params: SegmenterParams, refs: ReferenceSet, target_ds: Dataset, cfg: AdaptationConfig
) -> RunReport:
    """Select, annotate (via :class:`LabelOracle`), fine-tune and evaluate on a target domain."""
    prepared = prepare_dataset(target_ds, cfg.resolution)
    train_ds, _, test_ds = _split(prepared, cfg.seed)
    oracle = LabelOracle(train_ds)
    unlabeled = train_ds.map(Sample.without_truth)
    report = RunReport(config=asdict(cfg), manifest=None)
    report.checkpoints["source_only"] = params

    def timed(stage, fn, *args):
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        report.seconds[stage] = time.perf_counter() - t0
        return result

    def record(label, p):
        results, summary = evaluate_params(p, test_ds)
        report.per_sample[label] = results
        report.summaries[label] = summary

    record("source_only", params)
    manifest = timed("select", select_samples, params, refs, unlabeled, cfg)
    report.manifest = manifest
    truths = oracle.reveal(manifest.all_ids)
    labeled = _labeled_dataset(unlabeled, truths, [i for i in unlabeled.ids if i in truths], "labeled")

    stage1_ds = unlabeled.map(lambda s: replace(s, truth=truths[s.id]) if s.id in truths else s)
    theta1, trace1 = timed("stage1", stage1_finetune, params, stage1_ds, manifest, cfg)
    report.checkpoints["stage1"] = theta1
    report.loss_traces["stage1"] = trace1
    record("stage1", theta1)

    if cfg.semi_enabled:
        rest = unlabeled.subset([i for i in unlabeled.ids if i not in truths]) if len(truths) < len(unlabeled) else None
        pseudo = timed("stage2", stage2_pseudolabel, theta1, rest) if rest is not None else []
        theta3, trace3 = timed("stage3", stage3_joint, theta1, labeled, pseudo, unlabeled, cfg)
        report.checkpoints["stage3"] = theta3
        report.loss_traces["stage3"] = trace3
        record("stage3", theta3)
    report.labels_read = len(oracle.revealed)
    return report


def run_sfada(source_ds: Dataset, target_ds: Dataset, cfg: AdaptationConfig) -> RunReport:
    try:
        src = run_source_phase(source_ds, cfg)
    except Exception as exc:
        raise StageError("source", exc) from exc
    report = adapt(src.params, src.refs, target_ds, cfg)
    report.loss_traces["source"] = src.loss_trace
    report.seconds["source"] = src.seconds
    _, report.source_test = evaluate_params(src.params, src.test_split)
    return report
