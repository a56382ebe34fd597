"""``geossl`` command line: ingest, synth, pretrain, downstream, matrix, report, cam.

Settings come from one YAML file (``--config``). Precedence, lowest first:
built-in defaults, the config file, environment variables, command-line flags.

* ``GEOSSL_DATA_ROOT``: base directory for relative dataset roots (otherwise
  they are resolved against the config file's directory).
* ``GEOSSL_CACHE_DIR``: overrides ``cache_dir`` from the file.

The whole config is validated before any work starts. Failures print one JSON
object on stderr (``{"error": code, "message": ..., "problems": [...]}``) and
exit nonzero: 2 for invalid configuration or arguments, 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import explain, runner
from ._util import digest
from .augment import AugmentationConfig, downstream_transform, validate_config
from .data_ingest import DEFAULT_RATIOS, DATA_ROOT_ENV, load_image, make_splits, scan_dataset, synth_dataset
from .errors import ConfigError, GeoSSLError, InvalidArgument
from .models import EncoderConfig, ProjectionHeadConfig, load_checkpoint, restore_downstream_model
from .training import DownstreamHyperparams, PretextHyperparams, predict

log = logging.getLogger("geossl")

CACHE_ENV = "GEOSSL_CACHE_DIR"


class ConfigValidationError(ConfigError):
    def __init__(self, problems: list[str]):
        super().__init__(f"{len(problems)} configuration problem(s): " + "; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class MatrixPlanConfig:
    datasets: tuple[str, ...] = ()
    fractions: tuple[float, ...] = runner.FRACTIONS
    modes: tuple[str, ...] = ("finetune",)
    seeds: tuple[int, ...] = (0, 1, 2)
    cross_domain: bool = True
    diagonal: bool = True
    external_weights: str | None = None


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS


@dataclass(frozen=True)
class ClassifierConfig:
    hidden_dim: int = 512


SECTIONS = {
    "augmentation": AugmentationConfig,
    "encoder": EncoderConfig,
    "projection": ProjectionHeadConfig,
    "classifier": ClassifierConfig,
    "pretext": PretextHyperparams,
    "downstream": DownstreamHyperparams,
    "split": SplitConfig,
    "matrix": MatrixPlanConfig,
}
SCALARS = {"output_dir": "geossl_out", "cache_dir": None, "deterministic": True}


@dataclass(frozen=True)
class RunConfig:
    datasets: dict = field(default_factory=dict)  # id -> absolute root
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projection: ProjectionHeadConfig = field(default_factory=ProjectionHeadConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    pretext: PretextHyperparams = field(default_factory=PretextHyperparams)
    downstream: DownstreamHyperparams = field(default_factory=DownstreamHyperparams)
    split: SplitConfig = field(default_factory=SplitConfig)
    matrix: MatrixPlanConfig = field(default_factory=MatrixPlanConfig)
    output_dir: str = "geossl_out"
    cache_dir: str = "geossl_out/cache"
    deterministic: bool = True

    def digest(self) -> str:
        return digest(asdict(self))

    def settings(self) -> runner.RunSettings:
        return runner.RunSettings(
            augmentation=self.augmentation, encoder=self.encoder, projection=self.projection,
            classifier_hidden=self.classifier.hidden_dim,
            pretext=replace(self.pretext, deterministic=self.deterministic),
            downstream=replace(self.downstream, deterministic=self.deterministic),
            split_seed=self.split.seed, ratios=self.split.ratios,
        )


def _type_problem(path: str, value, default) -> str | None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "a string"
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
        want = "a list"
    else:
        return None
    return None if ok else f"{path}: expected {want}, got {value!r}"


def _section(name: str, raw, problems: list[str]):
    cls = SECTIONS[name]
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected a mapping")
        return cls()
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
            continue
        bad = _type_problem(f"{name}.{key}", value, getattr(defaults, key))
        if bad:
            problems.append(bad)
            continue
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(getattr(defaults, key), float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return cls()
    if name == "augmentation":
        problems.extend(f"augmentation.{p}" for p in validate_config(obj))
    elif hasattr(obj, "validate"):
        try:
            obj.validate()
        except ConfigError as exc:
            problems.append(f"{name}: {exc}")
    return obj


def _resolve_dataset_root(root: str, base: Path) -> Path:
    p = Path(os.path.expanduser(root))
    if p.is_absolute():
        return p
    env = os.environ.get(DATA_ROOT_ENV)
    return (Path(env) if env else base) / p


def build_config(raw: dict | None, base_dir=".", overrides: dict | None = None) -> RunConfig:
    """Validate a parsed config mapping and apply env and flag overrides.

    Every problem is collected, with its field path, before anything is raised.
    """
    raw = dict(raw or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    base = Path(base_dir)
    problems: list[str] = []
    for key in raw:
        if key not in SECTIONS and key not in SCALARS and key != "datasets":
            problems.append(f"{key}: unknown key")
    sections = {name: _section(name, raw.get(name), problems) for name in SECTIONS}

    datasets = {}
    raw_ds = raw.get("datasets") or {}
    if not isinstance(raw_ds, dict):
        problems.append("datasets: expected a mapping of id to root directory")
        raw_ds = {}
    for ds_id, root in raw_ds.items():
        if not isinstance(root, str):
            problems.append(f"datasets.{ds_id}: expected a path string")
            continue
        path = _resolve_dataset_root(root, base)
        if not path.is_dir():
            problems.append(f"datasets.{ds_id}: root {str(path)!r} does not exist")
        datasets[str(ds_id)] = str(path.resolve())

    scalars = {}
    for key, default in SCALARS.items():
        value = raw.get(key, default)
        if default is not None and value is not None:
            bad = _type_problem(key, value, default)
            if bad:
                problems.append(bad)
                value = default
        scalars[key] = value
    output_dir = overrides.get("output_dir") or str(base / scalars["output_dir"])
    cache_dir = (overrides.get("cache_dir") or os.environ.get(CACHE_ENV)
                 or (str(base / scalars["cache_dir"]) if scalars["cache_dir"] else str(Path(output_dir) / "cache")))
    deterministic = overrides.get("deterministic", scalars["deterministic"])

    m = sections["matrix"]
    for i, d in enumerate(m.datasets):
        if d not in raw_ds:
            problems.append(f"matrix.datasets[{i}]: unknown dataset id {d!r}")
    for i, f in enumerate(m.fractions):
        if f not in runner.FRACTIONS:
            problems.append(f"matrix.fractions[{i}]: {f} not in {list(runner.FRACTIONS)}")
    for i, mode in enumerate(m.modes):
        if mode not in runner.MODES:
            problems.append(f"matrix.modes[{i}]: unknown mode {mode!r}")
    if not m.seeds or len(set(m.seeds)) != len(m.seeds):
        problems.append("matrix.seeds: need at least one seed and no repeats")
    ext = m.external_weights
    if ext is not None:
        ext = os.path.expanduser(ext)
        ext = str(Path(ext) if Path(ext).is_absolute() else base / ext)
        if not Path(ext).is_file():
            problems.append(f"matrix.external_weights: file {ext!r} does not exist")
    elif "supervised_baseline" in m.modes:
        problems.append("matrix.external_weights: required by mode supervised_baseline")
    sp = sections["split"]
    if len(sp.ratios) != 3 or min(sp.ratios, default=0) <= 0 or abs(sum(sp.ratios) - 1) > 1e-9:
        problems.append("split.ratios: need three positive ratios summing to 1")
    enc, aug = sections["encoder"], sections["augmentation"]
    if tuple(aug.resize) != (enc.input_size, enc.input_size):
        problems.append(f"augmentation.resize: {list(aug.resize)} must equal encoder.input_size {enc.input_size}")
    if problems:
        raise ConfigValidationError(problems)
    sections["matrix"] = replace(m, external_weights=ext)
    return RunConfig(datasets=datasets, output_dir=output_dir, cache_dir=cache_dir,
                     deterministic=bool(deterministic), **sections)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return build_config({}, ".", overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigValidationError([f"--config: file {str(path)!r} does not exist"])
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigValidationError([f"--config: not valid YAML ({exc})"]) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigValidationError(["--config: top level must be a mapping"])
    return build_config(raw, path.parent, overrides)


# ---------------------------------------------------------------------------
# commands


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _manifests(cfg: RunConfig, ids) -> dict:
    return {d: scan_dataset(cfg.datasets[d], d) for d in ids}


def _pick_dataset(cfg: RunConfig, requested: str | None, flag: str) -> str:
    if requested:
        if requested not in cfg.datasets:
            raise ConfigValidationError([f"{flag}: unknown dataset id {requested!r}"])
        return requested
    if len(cfg.datasets) == 1:
        return next(iter(cfg.datasets))
    raise ConfigValidationError([f"{flag}: required when the config lists {len(cfg.datasets)} datasets"])


def cmd_ingest(args) -> int:
    manifest = scan_dataset(args.root, args.dataset_id, workers=args.workers)
    out = Path(args.out)
    manifest.save(out)
    result = {"manifest": str(out), "samples": len(manifest), "classes": manifest.class_counts(),
              "skipped": [str(s) for s in manifest.skipped]}
    if args.split_out:
        split = make_splits(manifest, DEFAULT_RATIOS, args.seed)
        split.save(args.split_out, manifest)
        result["split"] = str(args.split_out)
    _emit(result)
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    names = [f"syn_{c}" for c in "abc"] if args.trio else [args.dataset_id or out.name]
    roots = {}
    for k, name in enumerate(names):
        root = out / name if args.trio else out
        m = synth_dataset(args.classes, args.per_class, args.size, args.seed + k, root, name, args.layout)
        roots[name] = {"root": str(root), "samples": len(m)}
    _emit({"datasets": roots})
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    ds = _pick_dataset(cfg, args.dataset, "--dataset")
    manifests = _manifests(cfg, [ds])
    r = runner._Runner(manifests, cfg.settings(), cfg.cache_dir)
    r.ensure_pretext(ds)
    key = r.pretext_digests[ds]
    out = Path(cfg.output_dir) / "pretext" / ds
    out.mkdir(parents=True, exist_ok=True)
    for name in ("checkpoint", "pretext_log.csv", "pretext_log.jsonl"):
        src = Path(cfg.cache_dir) / key / name
        if src.exists():
            shutil.copyfile(src, out / ("checkpoint.ckpt" if name == "checkpoint" else name))
    _emit({"dataset": ds, "digest": key, "checkpoint": str(out / "checkpoint.ckpt"),
           "trained": r.stats.pretext_trainings, "cache_hits": r.stats.pretext_cache_hits})
    return 0


def cmd_downstream(args, cfg: RunConfig) -> int:
    target = _pick_dataset(cfg, args.target, "--target")
    source = args.source or target
    if source not in cfg.datasets:
        raise ConfigValidationError([f"--source: unknown dataset id {source!r}"])
    exp = runner.ExperimentConfig(source, target, args.fraction, args.mode, (args.seed,),
                                  cfg.matrix.external_weights)
    manifests = _manifests(cfg, sorted({source, target}))
    r = runner._Runner(manifests, cfg.settings(), cfg.cache_dir)
    if exp.needs_pretext:
        r.ensure_pretext(source)
    report = r.run_one(exp, args.seed, save_model=True)
    key = r.run_digest(exp, args.seed)
    out = Path(cfg.output_dir) / "downstream" / f"{source}__{target}__{args.fraction}__{args.mode}__s{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    for name in ("metrics.json", "model.ckpt", "downstream_log.csv", "downstream_log.jsonl"):
        src = Path(cfg.cache_dir) / key / name
        if src.exists():
            shutil.copyfile(src, out / name)
    _emit({"out": str(out), "digest": key, **report.scalars()})
    return 0


def cmd_matrix(args, cfg: RunConfig) -> int:
    m = cfg.matrix
    ids = list(m.datasets) or list(cfg.datasets)
    plan = runner.plan_matrix(ids, m.fractions, m.modes, m.seeds, m.cross_domain, m.diagonal,
                              known=cfg.datasets, external_weights=m.external_weights)
    manifests = _manifests(cfg, ids)
    if args.dry_run:
        for row in runner.describe_plan(plan, manifests, cfg.cache_dir, cfg.settings()):
            _emit(row)
        _emit({"cells": len(plan), "config_digest": cfg.digest()})
        return 0
    workers = args.workers if args.workers is not None else 1
    matrix = runner.run_matrix(plan, manifests, cfg.cache_dir, cfg.settings(), workers=workers)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix.save(out / "matrix.json")
    runner.emit_report(matrix, "csv", out / "matrix.csv")
    runner.emit_report(matrix, "markdown", out / "matrix.md")
    _emit({"cells": len(matrix.cells), "complete": matrix.complete, "stats": asdict(matrix.stats),
           "csv": str(out / "matrix.csv"), "matrix": str(out / "matrix.json")})
    return 0 if matrix.complete else 1


def cmd_report(args) -> int:
    matrix = runner.AdaptationMatrix.load(args.matrix)
    written = runner.emit_report(matrix, args.format, args.out, include_published=args.published)
    _emit({"written": [str(p) for p in written]})
    return 0


def cmd_cam(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "downstream":
        raise InvalidArgument(f"{args.checkpoint} is a {ckpt.kind} checkpoint; cam needs a downstream model")
    model = restore_downstream_model(ckpt).eval()
    baseline = None
    if args.baseline_checkpoint:
        baseline = restore_downstream_model(load_checkpoint(args.baseline_checkpoint)).eval()
    size = ckpt.encoder_config.input_size
    out = Path(args.out)
    results, grid_rows = [], []
    for path in args.images:
        sample = load_image(path)
        x = downstream_transform(sample, False, 0, size)
        pred, _ = predict(model, torch.from_numpy(x[None]))
        cls = args.class_index if args.class_index is not None else int(pred[0])
        cam = explain.activation_map(model, x, cls, args.layer, source=path)
        shown = np.clip(np.rint(x.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        dest = out / f"{Path(path).stem}_cam.png"
        explain.overlay(cam, shown, dest, args.colormap, args.alpha)
        row = [shown, explain.blend(cam, shown, args.colormap, args.alpha)]
        if baseline is not None:
            bcam = explain.activation_map(baseline, x, cls, args.layer, source=path)
            row.append(explain.blend(bcam, shown, args.colormap, args.alpha))
        grid_rows.append(row)
        results.append({"image": str(path), "class_index": cls, "predicted": int(pred[0]), "overlay": str(dest),
                        "model_digest": cam.model_digest})
    explain.comparison_grid(grid_rows, out / "cam_grid.png")
    _emit({"cams": results, "grid": str(out / "cam_grid.png")})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geossl", description="Self-supervised pretraining and domain-transfer runs.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--output-dir")
        sp.add_argument("--cache-dir")
        det = sp.add_mutually_exclusive_group()
        det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
        det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
        return sp

    sp = sub.add_parser("ingest", help="scan a folder-per-class dataset into a manifest")
    sp.add_argument("--root", required=True)
    sp.add_argument("--dataset-id", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split-out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("synth", help="write synthetic datasets")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dataset-id")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=40)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--layout", choices=("full", "quadrant"), default="full")
    sp.add_argument("--trio", action="store_true", help="write syn_a, syn_b, syn_c with seeds seed..seed+2")

    sp = with_config(sub.add_parser("pretrain", help="contrastive pretext training on one dataset"))
    sp.add_argument("--dataset")

    sp = with_config(sub.add_parser("downstream", help="one supervised downstream run"))
    sp.add_argument("--source", help="pretext dataset (defaults to the target)")
    sp.add_argument("--target")
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--mode", choices=runner.MODES, default="finetune")
    sp.add_argument("--seed", type=int, default=0)

    sp = with_config(sub.add_parser("matrix", help="run the full adaptation matrix"))
    sp.add_argument("--dry-run", action="store_true")
    sp.add_argument("--workers", type=int)

    sp = sub.add_parser("report", help="render a matrix.json as csv or markdown")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    sp.add_argument("--out", required=True)
    sp.add_argument("--published", action="store_true", help="add the labelled published-values reference")

    sp = sub.add_parser("cam", help="class activation overlays for a downstream checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--class-index", type=int)
    sp.add_argument("--layer")
    sp.add_argument("--baseline-checkpoint")
    sp.add_argument("--colormap", default="jet")
    sp.add_argument("--alpha", type=float, default=0.5)
    return p


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "report": cmd_report, "cam": cmd_cam}
CONFIG_COMMANDS = {"pretrain": cmd_pretrain, "downstream": cmd_downstream, "matrix": cmd_matrix}


def _fail(exc: BaseException, status: int) -> int:
    payload = {"error": getattr(exc, "code", type(exc).__name__), "message": str(exc)}
    if isinstance(exc, ConfigValidationError):
        payload["problems"] = exc.problems
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command in CONFIG_COMMANDS:
            cfg = load_config(args.config, {"output_dir": args.output_dir, "cache_dir": args.cache_dir,
                                            "deterministic": args.deterministic})
            if getattr(args, "workers", None) is not None and args.workers < 1:
                raise ConfigValidationError(["--workers: must be >= 1"])
            return CONFIG_COMMANDS[args.command](args, cfg)
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgument) as exc:
        return _fail(exc, 2)
    except (GeoSSLError, OSError, ValueError) as exc:
        log.debug("command failed", exc_info=True)
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
