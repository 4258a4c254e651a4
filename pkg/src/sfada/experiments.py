"""Desk-scale experiment matrix: transfer, strategy comparison, ablation and budget sweep.

Each source model is trained once per (dataset, config, seed) and cached on
disk as a checkpoint plus reference file; every adaptation run reloads those
files, so no source pixels reach the adaptation code. Adaptation results are
cached as JSON reports and every CSV row is rebuilt from them.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import GLOBAL_KEYS, ConfigError, GlobalConfig, coerce, format_value, global_from_mapping, parse_kv
from .data import Dataset, DataError, load_dataset
from .metrics import MetricResult, MetricSummary, summarize
from .pipeline import AdaptationConfig, adapt, evaluate_params, run_source_phase
from .reference import load_references, save_references
from .segmenter import load_checkpoint, save_checkpoint
from .synth import default_benchmark

# row label -> (strategy, checkpoint read from the run report)
METHODS = {
    "source_only": ("stdr", "source_only"),
    "random": ("random", "stage1"),
    "entropy": ("entropy", "stage1"),
    "alpha": ("alpha", "stage1"),
    "beta": ("beta", "stage1"),
    "stdr": ("stdr", "stage1"),
    "stdr+semi": ("stdr", "stage3"),
}
STRATEGY_ROWS = ("source_only", "random", "entropy", "stdr")
ABLATION_ROWS = ("alpha", "beta", "stdr", "stdr+semi")
# expected method orderings (lower DSC first), checked on the synthetic numbers
EXPECTED_ORDERINGS = (
    ("source_only", "random"),
    ("random", "stdr"),
    ("entropy", "stdr"),
    ("alpha", "stdr"),
    ("beta", "stdr"),
    ("stdr", "stdr+semi"),
)
TABLE_COLUMNS = ["setting", "method", "seeds", "n", "DSC_mean", "DSC_std", "HD95_mean", "HD95_std",
                 "ASD_mean", "ASD_std", "HD95_undefined"]
MATRIX_KEYS = GLOBAL_KEYS + ("seeds", "source", "targets", "methods", "budgets", "data_dir", "data_seed")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentMatrix:
    """Rows are every (source -> target, method) pair, each averaged over ``seeds``."""

    config: GlobalConfig = GlobalConfig()
    seeds: tuple[int, ...] = (0, 1, 2)
    source: str = "source"
    targets: tuple[str, ...] = ("targetA", "targetB")
    methods: tuple[str, ...] = tuple(METHODS)
    budgets: tuple[float, ...] = ()
    data_dir: Optional[str] = None
    data_seed: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.targets:
            raise ConfigError("targets must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method {unknown[0]!r}; expected one of {sorted(METHODS)}")
        for b in self.budgets:
            if not 0 < b <= 100:
                raise ConfigError(f"budget {b} outside (0, 100]")

    @property
    def rows(self) -> list[tuple[str, str]]:
        return [(f"{self.source}->{t}", m) for t in self.targets for m in self.methods]

    def render(self) -> str:
        extra = {
            "seeds": self.seeds, "source": self.source, "targets": self.targets, "methods": self.methods,
            "budgets": self.budgets, "data_seed": self.data_seed,
        }
        if self.data_dir is not None:
            extra["data_dir"] = self.data_dir
        return self.config.render() + "".join(f"{k} = {format_value(v)}\n" for k, v in extra.items())


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_matrix(text: str, origin: str = "<config>") -> ExperimentMatrix:
    values = parse_kv(text, MATRIX_KEYS, origin)
    kwargs: dict = {}
    if "seeds" in values:
        kwargs["seeds"] = tuple(coerce("seeds", v, int) for v in _split_list(values.pop("seeds")))
    if "targets" in values:
        kwargs["targets"] = tuple(_split_list(values.pop("targets")))
    if "methods" in values:
        kwargs["methods"] = tuple(_split_list(values.pop("methods")))
    if "budgets" in values:
        kwargs["budgets"] = tuple(coerce("budgets", v, float) for v in _split_list(values.pop("budgets")))
    if "source" in values:
        kwargs["source"] = values.pop("source")
    if "data_dir" in values:
        kwargs["data_dir"] = values.pop("data_dir")
    if "data_seed" in values:
        kwargs["data_seed"] = coerce("data_seed", values.pop("data_seed"), int)
    return ExperimentMatrix(config=global_from_mapping(values), **kwargs)


def load_matrix(path) -> ExperimentMatrix:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_matrix(path.read_text(), str(path))


def dataset_checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    for s in ds:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float64).tobytes())
        if s.truth is not None:
            h.update(np.ascontiguousarray(s.truth, dtype=np.uint8).tobytes())
    return h.hexdigest()


def _key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _summary_from_dict(d: dict) -> MetricSummary:
    return MetricSummary(**d)


@dataclass
class CachedRun:
    """The parts of a RunReport needed to rebuild table rows."""

    summaries: dict[str, MetricSummary]
    per_sample: dict[str, list[MetricResult]]
    manifest: Optional[dict]
    labels_read: int

    @classmethod
    def from_report_dict(cls, d: dict) -> "CachedRun":
        return cls(
            {k: _summary_from_dict(v) for k, v in d["summaries"].items()},
            {k: [MetricResult(**r) for r in v] for k, v in d["per_sample"].items()},
            d["manifest"],
            d["labels_read"],
        )


@dataclass
class SourceEntry:
    directory: Path
    source_test: MetricSummary

    @property
    def checkpoint(self) -> Path:
        return self.directory / "source.ckpt"

    @property
    def references(self) -> Path:
        return self.directory / "references.csv"


@dataclass
class Harness:
    """Runs and caches source phases and adaptation runs under ``out_dir/cache``."""

    out_dir: Path
    datasets: dict[str, Dataset]
    log: Callable[[str], None] = print
    source_trainings: int = 0
    adaptation_runs: int = 0
    _checksums: dict[str, str] = field(default_factory=dict)

    def checksum(self, name: str) -> str:
        if name not in self._checksums:
            self._checksums[name] = dataset_checksum(self.dataset(name))
        return self._checksums[name]

    def dataset(self, name: str) -> Dataset:
        if name not in self.datasets:
            raise DataError(f"dataset {name!r} is not available; have {sorted(self.datasets)}")
        return self.datasets[name]

    def _source_key(self, source: str, cfg: AdaptationConfig) -> str:
        relevant = {k: v for k, v in asdict(cfg).items()
                    if k not in ("budget_percent", "strategy", "stage1_iters", "stage3_iters", "semi_enabled")}
        return _key({"data": self.checksum(source), "cfg": relevant})

    def source_phase(self, source: str, cfg: AdaptationConfig) -> SourceEntry:
        d = self.out_dir / "cache" / "source" / self._source_key(source, cfg)
        meta_path = d / "meta.json"
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            return SourceEntry(d, _summary_from_dict(meta["source_test"]))
        self.log(f"training source model on {source!r} (seed {cfg.seed})")
        result = run_source_phase(self.dataset(source), cfg)
        _, test_summary = evaluate_params(result.params, result.test_split)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.params, d / "source.ckpt")
        save_references(result.refs, d / "references.csv", cfg.pool_k)
        meta = {
            "source_test": test_summary.to_dict(),
            "best_step": result.best_step,
            "val_history": result.val_history,
            "loss_trace": result.loss_trace,
        }
        meta_path.write_text(json.dumps(meta))
        self.source_trainings += 1
        return SourceEntry(d, test_summary)

    def run(self, source: str, target: str, cfg: AdaptationConfig) -> CachedRun:
        entry = self.source_phase(source, cfg)
        key = _key({"source": entry.directory.name, "target": self.checksum(target), "cfg": asdict(cfg)})
        path = self.out_dir / "cache" / "runs" / f"{key}.json"
        if path.is_file():
            return CachedRun.from_report_dict(json.loads(path.read_text()))
        self.log(f"adapting {source}->{target}: {cfg.strategy} {cfg.budget_percent:g}% "
                 f"semi={cfg.semi_enabled} seed={cfg.seed}")
        params = load_checkpoint(entry.checkpoint)
        refs = load_references(entry.references)
        report = adapt(params, refs, self.dataset(target), cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = report.to_dict()
        d.pop("seconds")  # keep cached reports free of timing noise
        path.write_text(json.dumps(d))
        self.adaptation_runs += 1
        return CachedRun.from_report_dict(d)

    def result(self, source: str, target: str, cfg: AdaptationConfig, checkpoint: str) -> list[MetricResult]:
        return self.run(source, target, cfg).per_sample[checkpoint]


def _row(setting: str, method: str, seeds: Sequence[int], results: list[MetricResult]) -> list[str]:
    s = summarize(results)
    vals = [s.dsc_mean, s.dsc_std, s.hd95_mean, s.hd95_std, s.asd_mean, s.asd_std]
    return [setting, method, " ".join(map(str, seeds)), str(s.n)] + [f"{v:.6f}" for v in vals] + [str(s.hd95_undefined)]


def _write_table(path: Path, columns: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def default_datasets(matrix: ExperimentMatrix) -> dict[str, Dataset]:
    if matrix.data_dir is not None:
        root = Path(matrix.data_dir)
        names = (matrix.source,) + matrix.targets
        return {n: load_dataset(root / n, n) for n in names}
    source, target_a, target_b = default_benchmark(matrix.data_seed, matrix.config.resolution)
    return {"source": source, "targetA": target_a, "targetB": target_b}


def _method_results(harness, matrix, target, method, seeds, budget=None) -> list[MetricResult]:
    strategy, checkpoint = METHODS[method]
    pooled: list[MetricResult] = []
    for seed in seeds:
        overrides = {"seed": seed}
        if budget is not None:
            overrides["budget_percent"] = budget
        # one semi-enabled run also serves the stage-1 and source-only rows
        shares_semi = strategy == "stdr" and "stdr+semi" in matrix.methods and budget in (None, matrix.config.budget_percent)
        cfg = matrix.config.adaptation(strategy, checkpoint == "stage3" or shares_semi, **overrides)
        try:
            pooled.extend(harness.result(matrix.source, target, cfg, checkpoint))
        except Exception as exc:
            raise ExperimentError(f"row {matrix.source}->{target} / {method} / seed {seed}: {exc}") from exc
    return pooled


def run_matrix(
    matrix: ExperimentMatrix,
    out_dir,
    datasets: Optional[dict[str, Dataset]] = None,
    log: Callable[[str], None] = print,
) -> dict[str, Path]:
    """Execute every row and write transfer/strategies/ablation/budget CSVs, ``summary.md`` and ``manifest.json``.

    Tables already finished stay on disk if a later row fails.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    harness = Harness(out, datasets if datasets is not None else default_datasets(matrix), log)
    for name in (matrix.source,) + matrix.targets:
        harness.dataset(name)
    seeds = matrix.seeds
    written: dict[str, Path] = {}
    dsc_means: dict[tuple[str, str], float] = {}

    def method_rows(methods):
        rows = []
        for target in matrix.targets:
            for m in methods:
                if m not in matrix.methods:
                    continue
                res = _method_results(harness, matrix, target, m, seeds)
                rows.append(_row(f"{matrix.source}->{target}", m, seeds, res))
                dsc_means[(target, m)] = summarize(res).dsc_mean
        return rows

    strategy_rows = method_rows(STRATEGY_ROWS)
    ablation_rows = method_rows(ABLATION_ROWS)

    transfer = []
    if "source_only" in matrix.methods:
        src_tests = []
        for seed in seeds:
            entry = harness.source_phase(matrix.source, matrix.config.adaptation(seed=seed))
            src_tests.append(entry.source_test.dsc_mean)
        src_mean = float(np.mean(src_tests))
        for target in matrix.targets:
            tgt = dsc_means[(target, "source_only")]
            transfer.append([f"{matrix.source}->{target}", f"{src_mean:.6f}", f"{tgt:.6f}", f"{src_mean - tgt:.6f}"])
    _write_table(out / "transfer.csv", ["setting", "source_test_DSC", "target_DSC", "DSC_drop"], transfer)
    written["transfer"] = out / "transfer.csv"
    _write_table(out / "strategies.csv", TABLE_COLUMNS, strategy_rows)
    written["strategies"] = out / "strategies.csv"
    _write_table(out / "ablation.csv", TABLE_COLUMNS, ablation_rows)
    written["ablation"] = out / "ablation.csv"

    budget_rows = []
    for target in matrix.targets:
        for b in matrix.budgets:
            res = _method_results(harness, matrix, target, "stdr", seeds, budget=b)
            budget_rows.append(_row(f"{matrix.source}->{target}", f"stdr@{b:g}%", seeds, res))
    _write_table(out / "budget.csv", TABLE_COLUMNS, budget_rows)
    written["budget"] = out / "budget.csv"

    summary = out / "summary.md"
    summary.write_text(_summary_markdown(matrix, transfer, strategy_rows, ablation_rows, budget_rows, dsc_means))
    written["summary"] = summary
    (out / "config.txt").write_text(matrix.render())
    written["config"] = out / "config.txt"
    manifest = {name: {"file": p.name, "sha256": _sha256(p)} for name, p in sorted(written.items())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    written["manifest"] = out / "manifest.json"
    log(f"source trainings: {harness.source_trainings}, adaptation runs: {harness.adaptation_runs}")
    return written


def _md_table(columns, rows) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _summary_markdown(matrix, transfer, strategy_rows, ablation_rows, budget_rows, dsc_means) -> str:
    parts = ["# Benchmark summary\n", "## Resolved config\n", "```\n" + matrix.render() + "```\n"]
    if transfer:
        parts += ["## Direct transfer\n", _md_table(["setting", "source test DSC", "target DSC", "drop"], transfer)]
    short = [TABLE_COLUMNS[i] for i in (0, 1, 4, 5, 6, 8)]

    def pick(rows):
        return [[r[i] for i in (0, 1, 4, 5, 6, 8)] for r in rows]

    if strategy_rows:
        parts += ["## Selection strategies\n", _md_table(short, pick(strategy_rows))]
    if ablation_rows:
        parts += ["## Ablation\n", _md_table(short, pick(ablation_rows))]
    if budget_rows:
        parts += ["## Budget sweep\n", _md_table(short, pick(budget_rows))]
    checks = []
    for target in matrix.targets:
        for lo, hi in EXPECTED_ORDERINGS:
            if (target, lo) in dsc_means and (target, hi) in dsc_means:
                a, b = dsc_means[(target, lo)], dsc_means[(target, hi)]
                checks.append([target, f"{lo} < {hi}", f"{a:.2f} vs {b:.2f}", "yes" if a < b else "no"])
    if checks:
        parts += ["## Expected orderings\n",
                  _md_table(["target", "expected ordering", "synthetic DSC", "holds"], checks)]
    return "\n".join(parts)


def budget_sweep(
    source: str,
    target: str,
    percents: Sequence[float],
    seeds: Sequence[int],
    out_csv,
    config: GlobalConfig = GlobalConfig(),
    datasets: Optional[dict[str, Dataset]] = None,
    cache_dir=None,
    log: Callable[[str], None] = print,
) -> Path:
    """STDR fine-tuning on annotated samples only, one row per budget percent."""
    matrix = ExperimentMatrix(config=config, seeds=tuple(seeds), source=source, targets=(target,),
                              methods=("stdr",), budgets=tuple(percents))
    out_csv = Path(out_csv)
    harness = Harness(Path(cache_dir) if cache_dir else out_csv.parent,
                      datasets if datasets is not None else default_datasets(matrix), log)
    rows = []
    for b in percents:
        res = _method_results(harness, matrix, target, "stdr", seeds, budget=b)
        rows.append(_row(f"{source}->{target}", f"stdr@{b:g}%", seeds, res))
    _write_table(out_csv, TABLE_COLUMNS, rows)
    return out_csv
