"""Round-robin domain-adaptation matrix: plan, run with a checkpoint cache, report.

Every source dataset gets one contrastive pretext run. Its checkpoint is then
reused by every (target, label fraction, mode, seed) cell. Cross-domain cells
pair each source with every other dataset; diagonal cells pretrain and
evaluate on the same dataset.

Cache layout under ``cache_dir``::

    <digest>/checkpoint        pretext checkpoint of one source
    <digest>/metrics.json      MetricsReport of one (cell, seed) run
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from filelock import FileLock

from ._util import atomic_write_text, digest
from .augment import AugmentationConfig
from .data_ingest import DEFAULT_RATIOS, DatasetManifest, ImageStore, make_splits, record_reads, subsample_labels
from .errors import ConfigError, InvalidArgument
from .metrics import MetricsReport
from .models import ClassifierHeadConfig, EncoderConfig, ProjectionHeadConfig, load_checkpoint, save_checkpoint
from .training import DownstreamHyperparams, PretextHyperparams, pretrain, train_downstream

log = logging.getLogger(__name__)

FRACTIONS = (0.1, 0.5, 1.0)
MODES = ("linear", "finetune", "supervised_baseline", "scratch")
PRETEXT_MODES = ("linear", "finetune")
CSV_HEADER = ("pretext", "downstream", "fraction", "mode", "seed_count", "accuracy", "precision", "recall", "f1", "auc")
PUBLISHED_LABEL = "published values"


@dataclass(frozen=True)
class ExperimentConfig:
    pretext_dataset: str
    downstream_dataset: str
    fraction: float
    mode: str
    seeds: tuple[int, ...]
    external_weights: str | None = None

    def __post_init__(self):
        if self.fraction not in FRACTIONS:
            raise InvalidArgument(f"fraction {self.fraction} not in {FRACTIONS}")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode {self.mode!r} not in {MODES}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise InvalidArgument("seeds must be a non-empty list without repeats")
        if self.mode == "supervised_baseline" and not self.external_weights:
            raise InvalidArgument("supervised_baseline needs an external weights path")

    @property
    def key(self) -> tuple:
        return (self.pretext_dataset, self.downstream_dataset, self.fraction, self.mode)

    @property
    def cross_domain(self) -> bool:
        return self.pretext_dataset != self.downstream_dataset

    @property
    def needs_pretext(self) -> bool:
        return self.mode in PRETEXT_MODES


def plan_matrix(datasets, fractions=FRACTIONS, modes=("finetune",), seeds=(0, 1, 2), cross_domain: bool = True,
                diagonal: bool = False, known=None, external_weights: str | None = None) -> list[ExperimentConfig]:
    """Cells in a fixed order: cross-domain by (source, target), then the diagonal.

    Within a pair, fractions run from largest to smallest, then modes in the
    order given.
    """
    datasets = list(datasets)
    if len(set(datasets)) != len(datasets):
        raise InvalidArgument("dataset ids must be unique")
    if known is not None:
        unknown = [d for d in datasets if d not in set(known)]
        if unknown:
            raise InvalidArgument(f"unknown dataset ids: {unknown}")
    if cross_domain and len(datasets) < 2:
        raise InvalidArgument("cross-domain cells need at least two datasets")
    if not datasets or not (cross_domain or diagonal):
        raise InvalidArgument("empty plan")
    fracs = sorted({float(f) for f in fractions}, reverse=True)
    seeds = tuple(int(s) for s in seeds)

    def cells(s, t):
        return [ExperimentConfig(s, t, f, m, seeds, external_weights) for f in fracs for m in modes]

    plan = []
    if cross_domain:
        for s in datasets:
            for t in datasets:
                if s != t:
                    plan.extend(cells(s, t))
    if diagonal:
        for s in datasets:
            plan.extend(cells(s, s))
    return plan


@dataclass(frozen=True)
class RunSettings:
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projection: ProjectionHeadConfig = field(default_factory=ProjectionHeadConfig)
    classifier_hidden: int = 512
    pretext: PretextHyperparams = field(default_factory=PretextHyperparams)
    downstream: DownstreamHyperparams = field(default_factory=DownstreamHyperparams)
    split_seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS


@dataclass
class RunStats:
    pretext_trainings: int = 0
    pretext_cache_hits: int = 0
    runs_computed: int = 0
    runs_cached: int = 0
    failures: int = 0


@dataclass
class CellResult:
    config: ExperimentConfig
    status: str = "ok"  # "ok" | "error"
    reports: list[MetricsReport] = field(default_factory=list)
    error: str | None = None

    def summary(self) -> dict[str, tuple[float | None, float | None]]:
        """Mean and sample std over seeds for each scalar metric."""
        out = {}
        for k in MetricsReport.SCALARS:
            vals = [getattr(r, k) for r in self.reports if getattr(r, k) is not None]
            if not vals:
                out[k] = (None, None)
                continue
            out[k] = (float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
        return out

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "status": self.status, "error": self.error,
                "reports": [r.to_dict() for r in self.reports]}

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        cfg = dict(d["config"])
        cfg["seeds"] = tuple(cfg["seeds"])
        return cls(ExperimentConfig(**cfg), d["status"], [MetricsReport.from_dict(r) for r in d["reports"]],
                   d.get("error"))


@dataclass
class AdaptationMatrix:
    cells: dict[tuple, CellResult] = field(default_factory=dict)
    stats: RunStats = field(default_factory=RunStats)
    pretext_reads: dict[str, list[str]] = field(default_factory=dict)

    def add(self, cell: CellResult) -> None:
        if cell.config.key in self.cells:
            raise InvalidArgument(f"duplicate cell {cell.config.key}")
        self.cells[cell.config.key] = cell

    @property
    def complete(self) -> bool:
        return all(c.status == "ok" for c in self.cells.values())

    def section(self, cross_domain: bool) -> list[CellResult]:
        return [c for c in self.cells.values() if c.config.cross_domain == cross_domain]

    def to_json(self) -> str:
        return json.dumps({"format": "geossl-matrix", "version": 1, "complete": self.complete,
                           "stats": asdict(self.stats),
                           "cells": [c.to_dict() for c in self.cells.values()]}, sort_keys=True, indent=1)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "AdaptationMatrix":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "geossl-matrix":
            raise ConfigError(f"{path} is not a matrix file")
        m = cls(stats=RunStats(**d["stats"]))
        for c in d["cells"]:
            m.add(CellResult.from_dict(c))
        return m


# ---------------------------------------------------------------------------
# running


class _Runner:
    def __init__(self, manifests: dict[str, DatasetManifest], settings: RunSettings, cache_dir):
        self.manifests = manifests
        self.settings = settings
        self.cache = Path(cache_dir)
        self.stats = RunStats()
        self._stats_lock = threading.Lock()
        self.stores = {k: ImageStore(m) for k, m in manifests.items()}
        self.splits = {k: make_splits(m, settings.ratios, settings.split_seed) for k, m in manifests.items()}
        self.pretext: dict[str, object] = {}
        self.pretext_digests: dict[str, str] = {}
        self.reads: dict[str, list[str]] = {}

    def _count(self, name: str) -> None:
        with self._stats_lock:
            setattr(self.stats, name, getattr(self.stats, name) + 1)

    def pretext_digest(self, source: str) -> str:
        s = self.settings
        return digest({"stage": "pretext", "dataset": self.manifests[source].digest(), "split_seed": s.split_seed,
                       "ratios": s.ratios, "aug": asdict(s.augmentation), "enc": asdict(s.encoder),
                       "proj": asdict(s.projection), "hp": asdict(s.pretext)})

    def ensure_pretext(self, source: str):
        key = self.pretext_digest(source)
        out = self.cache / key
        path = out / "checkpoint"
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out) + ".lock"):
            if path.exists():
                self._count("pretext_cache_hits")
                ckpt = load_checkpoint(path)
            else:
                s = self.settings
                with record_reads() as reads:
                    ckpt, tlog = pretrain(self.manifests[source], self.splits[source], s.augmentation, s.encoder,
                                          s.projection, s.pretext, out_dir=out, store=self.stores[source])
                # pretrain writes checkpoint.ckpt every epoch; the cache entry is published last
                (out / "checkpoint.ckpt").replace(path)
                self.reads[source] = sorted(str(p) for p in reads)
                self._count("pretext_trainings")
        self.pretext[source] = ckpt
        self.pretext_digests[source] = key
        return ckpt

    def run_digest(self, cfg: ExperimentConfig, seed: int) -> str:
        s = self.settings
        return digest({"stage": "downstream", "key": cfg.key, "seed": seed,
                       "pretext": self.pretext_digests.get(cfg.pretext_dataset) if cfg.needs_pretext else None,
                       "external": cfg.external_weights if cfg.mode == "supervised_baseline" else None,
                       "target": self.manifests[cfg.downstream_dataset].digest(), "split_seed": s.split_seed,
                       "ratios": s.ratios, "enc": asdict(s.encoder), "hidden": s.classifier_hidden,
                       "hp": asdict(replace(s.downstream, seed=0))})

    def run_one(self, cfg: ExperimentConfig, seed: int, save_model: bool = False) -> MetricsReport:
        """Metrics of one (cell, seed); ``save_model`` also keeps ``<digest>/model.ckpt``."""
        key = self.run_digest(cfg, seed)
        out = self.cache / key
        path = out / "metrics.json"
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out) + ".lock"):
            if path.exists() and (not save_model or (out / "model.ckpt").exists()):
                self._count("runs_cached")
                return MetricsReport.from_json(path.read_text())
            target = self.manifests[cfg.downstream_dataset]
            split = subsample_labels(self.splits[cfg.downstream_dataset], cfg.fraction, seed, target)
            hp = replace(self.settings.downstream, seed=seed)
            cls_cfg = ClassifierHeadConfig(target.num_classes, self.settings.classifier_hidden)
            if cfg.needs_pretext:
                ckpt, mode, ext = self.pretext[cfg.pretext_dataset], cfg.mode, None
            else:
                ckpt, mode = None, "finetune"
                ext = cfg.external_weights if cfg.mode == "supervised_baseline" else None
            model, tlog, report = train_downstream(target, split, ckpt, mode, hp,
                                                   None if ckpt else self.settings.encoder, cls_cfg, ext,
                                                   store=self.stores[cfg.downstream_dataset])
            tlog.write(out, "downstream_log")
            if save_model:
                save_checkpoint(out / "model.ckpt", model, {"cell": list(cfg.key), "seed": seed,
                                                            "class_names": list(target.classes)})
            atomic_write_text(path, report.to_json())
            self._count("runs_computed")
            return report


def run_matrix(plan: list[ExperimentConfig], manifests: dict[str, DatasetManifest], cache_dir,
               settings: RunSettings | None = None, workers: int = 1) -> AdaptationMatrix:
    """Run every cell of ``plan``; failed cells are kept with ``status="error"``.

    Pretext runs happen first, sequentially, one per source that needs one.
    Downstream (cell, seed) runs then go to a pool of ``workers`` threads.
    """
    settings = settings or RunSettings()
    missing = sorted({d for c in plan for d in (c.pretext_dataset, c.downstream_dataset)} - set(manifests))
    if missing:
        raise InvalidArgument(f"no manifest for dataset ids {missing}")
    runner = _Runner(manifests, settings, cache_dir)
    runner.cache.mkdir(parents=True, exist_ok=True)
    matrix = AdaptationMatrix()
    for cfg in plan:
        matrix.add(CellResult(cfg))

    pretext_errors = {}
    for source in dict.fromkeys(c.pretext_dataset for c in plan if c.needs_pretext):
        try:
            runner.ensure_pretext(source)
        except Exception as exc:  # a broken source fails its cells, not the whole matrix
            log.exception("pretext on %s failed", source)
            pretext_errors[source] = f"pretext failed: {exc}"

    jobs = []
    for cfg in plan:
        if cfg.needs_pretext and cfg.pretext_dataset in pretext_errors:
            cell = matrix.cells[cfg.key]
            cell.status, cell.error = "error", pretext_errors[cfg.pretext_dataset]
            continue
        jobs.extend((cfg, seed) for seed in cfg.seeds)

    def job(item):
        cfg, seed = item
        try:
            return runner.run_one(cfg, seed), None
        except Exception as exc:
            log.exception("cell %s seed %d failed", cfg.key, seed)
            return None, f"seed {seed}: {type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    for (cfg, _), (report, err) in zip(jobs, results):
        cell = matrix.cells[cfg.key]
        if err is not None:
            cell.status = "error"
            cell.error = err if cell.error is None else f"{cell.error}; {err}"
        else:
            cell.reports.append(report)
    for cell in matrix.cells.values():
        if cell.status == "error":
            runner.stats.failures += 1
    matrix.stats = runner.stats
    matrix.pretext_reads = runner.reads
    return matrix


def describe_plan(plan: list[ExperimentConfig], manifests: dict[str, DatasetManifest], cache_dir,
                  settings: RunSettings | None = None) -> list[dict]:
    """Every cell with its cache digests and cache state; nothing is trained or written."""
    runner = _Runner(manifests, settings or RunSettings(), cache_dir)
    out = []
    for cfg in plan:
        pre = runner.pretext_digest(cfg.pretext_dataset) if cfg.needs_pretext else None
        if pre:
            runner.pretext_digests[cfg.pretext_dataset] = pre
        runs = {s: runner.run_digest(cfg, s) for s in cfg.seeds}
        out.append({"pretext": cfg.pretext_dataset, "downstream": cfg.downstream_dataset, "fraction": cfg.fraction,
                    "mode": cfg.mode, "cross_domain": cfg.cross_domain, "pretext_digest": pre,
                    "pretext_cached": bool(pre) and (runner.cache / pre / "checkpoint").exists(),
                    "runs": {str(s): d for s, d in runs.items()},
                    "runs_cached": sum((runner.cache / d / "metrics.json").exists() for d in runs.values())})
    return out


# ---------------------------------------------------------------------------
# reports


def fmt_metric(v) -> str:
    """Percent with two decimals; one formatter for every emitter."""
    return "" if v is None else f"{100.0 * v:.2f}"


def _percent(f: float) -> str:
    return f"{round(100 * f)}%"


def load_published() -> dict:
    return json.loads(resources.files("geossl").joinpath("data/published_values.json").read_text())


def _rows(matrix: AdaptationMatrix):
    cells = matrix.section(True) + matrix.section(False)
    for c in cells:
        s = c.summary() if c.status == "ok" else {k: (None, None) for k in MetricsReport.SCALARS}
        yield c, s


def matrix_csv(matrix: AdaptationMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c, s in _rows(matrix):
        k = c.config
        w.writerow([k.pretext_dataset, k.downstream_dataset, repr(k.fraction), k.mode,
                    len(c.reports) if c.status == "ok" else 0] + [fmt_metric(s[m][0]) for m in MetricsReport.SCALARS])
    return buf.getvalue()


PUBLISHED_COLUMNS = ("label", "table", "kind", "pretext", "downstream", "dataset", "source", "method", "fraction",
                     "accuracy", "precision", "recall", "f1", "auc")


def published_csv(published: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PUBLISHED_COLUMNS)
    for t in published["tables"]:
        for r in t["rows"]:
            row = {"label": published["label"], "table": t["table"], "kind": t["kind"], **r}
            w.writerow([row.get(k, "") for k in PUBLISHED_COLUMNS])
    return buf.getvalue()


def _md_table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines.extend("| " + " | ".join(str(x) for x in r) + " |" for r in rows)
    return lines


def matrix_markdown(matrix: AdaptationMatrix, published: dict | None = None) -> str:
    lines = ["# Domain adaptation results", "",
             f"Computed by this run. Values are mean ± std in percent over seeds. "
             f"Matrix complete: {'yes' if matrix.complete else 'no'}.", ""]
    for title, cross in (("Cross-domain (pretext ≠ downstream)", True), ("In-domain (pretext = downstream)", False)):
        cells = matrix.section(cross)
        if not cells:
            continue
        rows = []
        for c in cells:
            k = c.config
            s = c.summary() if c.status == "ok" else None
            vals = ([f"{fmt_metric(s[m][0])} ± {fmt_metric(s[m][1])}" if s[m][0] is not None else "n/a"
                     for m in MetricsReport.SCALARS] if s else [f"error: {c.error}"] + [""] * 4)
            rows.append([k.pretext_dataset, k.downstream_dataset, _percent(k.fraction), k.mode,
                         len(c.reports) if s else 0, *vals])
        lines += [f"## {title}", ""]
        lines += _md_table(["pretext", "downstream", "% data", "mode", "seeds", "accuracy", "precision", "recall",
                            "f1", "auc"], rows)
        lines.append("")
    if published is not None:
        lines += [f"## Reference: {published['label']}", "",
                  "Published numbers for side-by-side reading, copied verbatim; not produced by this run.", ""]
        for t in published["tables"]:
            lines += [f"### Table {t['table']} ({PUBLISHED_LABEL}): {t['caption']}", ""]
            if t["kind"] in ("domain_adaptation", "in_domain"):
                hdr = ["pretext", "downstream", "% data", "accuracy", "precision", "recall", "f1"]
                rows = [[r["pretext"], r["downstream"], r["percent"], r["accuracy"], r["precision"], r["recall"],
                         r["f1"]] for r in t["rows"]]
            elif t["kind"] == "comparison":
                hdr = ["source", "method", "accuracy"]
                rows = [[r["source"], r["method"], r["accuracy"]] for r in t["rows"]]
            else:
                hdr = ["dataset", "% data", "accuracy", "precision", "recall", "f1", "auc"]
                rows = [[r["dataset"], r["percent"], r["accuracy"], r["precision"], r["recall"], r["f1"], r["auc"]]
                        for r in t["rows"]]
            lines += _md_table(hdr, rows) + [""]
    return "\n".join(lines)


def emit_report(matrix: AdaptationMatrix, fmt: str, out_path, include_published: bool = False) -> list[Path]:
    """Write the matrix as CSV or markdown; returns the files written.

    With ``include_published`` the markdown gains a labelled reference
    section. CSV keeps published numbers out of the results file and writes
    them to ``<stem>.published.csv`` instead.
    """
    if not matrix.cells:
        raise InvalidArgument("empty matrix")
    out_path = Path(out_path)
    published = load_published() if include_published else None
    if fmt == "csv":
        atomic_write_text(out_path, matrix_csv(matrix))
        written = [out_path]
        if published is not None:
            side = out_path.with_name(out_path.stem + ".published.csv")
            atomic_write_text(side, published_csv(published))
            written.append(side)
        return written
    if fmt == "markdown":
        atomic_write_text(out_path, matrix_markdown(matrix, published))
        return [out_path]
    raise InvalidArgument(f"unknown report format {fmt!r}")
