"""Command-line entry point: prepare-data, train, report, analyze-certainty.

Exit codes: 0 success, 1 validation error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus import SPLITS, CorpusError, build_turn_records, dataset_statistics, load_dialogues, \
    load_icr_annotation, read_records, write_records
from .model import ConfigError, ModelConfig

log = logging.getLogger("icr_policies")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
TASKS = ("when", "what")
TABLE1_COLUMNS = ("when", "what", "any", "add_delete", "move", "flip", "resize")
DEFAULT_GRID = "data/experiment_grid.json"


class DataError(RuntimeError):
    """Missing or unreadable inputs (exit code 2)."""


def records_path(data_dir: str | Path, split: str, task: str) -> Path:
    return Path(data_dir) / f"{split}_{task}.records.json.gz"


def dump_path(run_dir: str | Path, split: str) -> Path:
    return Path(run_dir) / f"predictions_{split}.npz"


def _write_guarded(path: Path, payload: bytes, overwrite: bool) -> None:
    """Write ``payload`` unless a different file is already there."""
    if path.exists() and path.read_bytes() != payload and not overwrite:
        raise ConfigError(f"{path} exists with different content; pass --overwrite to replace it")
    path.write_bytes(payload)


# --- prepare-data --------------------------------------------------------------

def cmd_prepare_data(dataset: str | Path, annotation: str | Path, out_dir: str | Path,
                     overwrite: bool = False) -> dict[str, dict[str, float]]:
    """Canonical record files per split and task plus the label statistics."""
    for p in (dataset, annotation):
        if not Path(p).is_file():
            raise DataError(f"input file not found: {p}")
    games = load_dialogues(dataset)
    annotations = load_icr_annotation(annotation)
    try:
        by_task = {task: build_turn_records(games, annotations, task) for task in TASKS}
    except ValueError as exc:
        if isinstance(exc, CorpusError):
            raise
        raise CorpusError(str(exc)) from None

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        for task, records in by_task.items():
            for split in SPLITS:
                tmp_file = Path(tmp) / "r.gz"
                write_records(tmp_file, [r for r in records if r.split == split])
                _write_guarded(records_path(out_dir, split, task), tmp_file.read_bytes(), overwrite)

    stats = dataset_statistics(by_task["when"] + by_task["what"])
    _write_guarded(out_dir / "statistics.json",
                   (json.dumps(stats, indent=1, sort_keys=True) + "\n").encode("utf-8"), overwrite)
    lines = [",".join(("split",) + TABLE1_COLUMNS)]
    lines += [",".join([split] + [f"{stats[split][c]:.2f}" for c in TABLE1_COLUMNS]) for split in stats]
    _write_guarded(out_dir / "table1.csv", ("\n".join(lines) + "\n").encode("utf-8"), overwrite)
    return stats


def format_statistics(stats: dict[str, dict[str, float]]) -> str:
    head = f"{'split':<7}" + "".join(f"{c:>12}" for c in TABLE1_COLUMNS)
    rows = [f"{s:<7}" + "".join(f"{v[c]:>12.2f}" for c in TABLE1_COLUMNS) for s, v in stats.items()]
    return "\n".join([head, *rows])


# --- experiment specs ----------------------------------------------------------

@dataclass
class ExperimentSpec:
    """One training run: model variant, input flags, task and overrides."""

    name: str
    variant: str
    inputs: str
    task: str = "when"
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    init_from: str | None = None
    data: str | None = None
    text_encoder: str = "bert-base-uncased"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"spec {d.get('name', '?')!r}: unknown keys {sorted(unknown)}")
        if "name" not in d or not str(d["name"]).strip():
            raise ConfigError("every spec needs a name")
        if "/" in d["name"] or d["name"].startswith("."):
            raise ConfigError(f"spec name {d['name']!r} is not a valid directory name")
        spec = cls(**d)
        spec.model_config()
        spec.train_config()
        return spec

    def model_config(self, text_dim: int | None = None) -> ModelConfig:
        kw = dict(self.model)
        if text_dim is not None:
            kw["text_dim"] = text_dim
        try:
            return ModelConfig.from_inputs(self.variant, self.inputs, self.task, **kw)
        except TypeError as exc:
            raise ConfigError(f"spec {self.name!r}: {exc}") from None

    def train_config(self, **overrides):
        from .training import TrainConfig

        return TrainConfig.from_dict({**self.train, **overrides})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def load_specs(path: str | Path) -> list[ExperimentSpec]:
    """A spec file holds one spec object or a list; a grid holds {"runs": [...]}."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read spec file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if isinstance(doc, dict) and "runs" in doc:
        defaults = doc.get("defaults", {})
        entries = [{**defaults, **run} for run in doc["runs"]]
    else:
        entries = doc if isinstance(doc, list) else [doc]
    specs = [ExperimentSpec.from_dict(e) for e in entries]
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate run names: {dupes}")
    for s in specs:
        if s.init_from is not None and s.init_from not in names and not Path(s.init_from).exists():
            raise ConfigError(f"run {s.name!r}: init_from {s.init_from!r} is neither a run in this grid nor a file")
        if s.init_from is not None and s.task != "what":
            raise ConfigError(f"run {s.name!r}: only Task-2 runs are initialised from a checkpoint")
    return specs


def default_grid_path() -> Path:
    return Path(str(resources.files("icr_policies").joinpath(DEFAULT_GRID)))


# --- train ---------------------------------------------------------------------

@dataclass
class RunOptions:
    data: str | None = None
    out: str = "runs"
    seed: int | None = None
    deterministic: bool = False
    device: str | None = None
    text_encoder: str | None = None
    train_overrides: dict = field(default_factory=dict)
    model_overrides: dict = field(default_factory=dict)
    skip_existing: bool = False


def _load_split(data_dir: Path, split: str, task: str):
    path = records_path(data_dir, split, task)
    if not path.is_file():
        raise DataError(f"prepared records not found: {path} (run prepare-data first)")
    return read_records(path)


def _resolve_init(spec: ExperimentSpec, out: Path) -> Path | None:
    if spec.init_from is None:
        return None
    as_run = out / spec.init_from / "best.ckpt"
    if as_run.is_file():
        return as_run
    if Path(spec.init_from).is_file():
        return Path(spec.init_from)
    raise DataError(f"run {spec.name!r}: pretrained checkpoint for {spec.init_from!r} not found")


def cmd_train(spec: ExperimentSpec, opts: RunOptions) -> Path:
    """Train one spec; writes config, metric log, checkpoints and prediction dumps."""
    import torch

    from .encoders import TextEncoder
    from .evaluation import metrics_from_dump, per_action_ap_from_dump
    from .training import Featurizer, finetune_what, load_checkpoint, predict_dump, seed_everything, train

    out = Path(opts.out)
    run_dir = out / spec.name
    if (run_dir / "config.json").exists():
        if opts.skip_existing:
            log.info("skipping %s (already trained)", spec.name)
            return run_dir
        raise ConfigError(f"run directory {run_dir} already holds a run; pick another --out or --skip-existing")

    overrides = dict(opts.train_overrides)
    if opts.seed is not None:
        overrides["seed"] = opts.seed
    if opts.deterministic:
        overrides["deterministic"] = True
    if opts.device is not None:
        overrides["device"] = opts.device
    tcfg = spec.train_config(**overrides)
    spec = ExperimentSpec.from_dict({**spec.to_dict(), "model": {**spec.model, **opts.model_overrides},
                                     **({"text_encoder": opts.text_encoder} if opts.text_encoder else {})})
    data_dir = Path(opts.data or spec.data or "")
    if not data_dir.is_dir():
        raise DataError(f"prepared data directory not found: {data_dir}")
    init = _resolve_init(spec, out)

    seed_everything(tcfg.seed, tcfg.deterministic)
    text_encoder = TextEncoder.load(spec.text_encoder, seed=tcfg.seed)
    mcfg = spec.model_config(text_dim=text_encoder.dim)
    splits = {s: _load_split(data_dir, s, spec.task) for s in SPLITS}
    featurizer = Featurizer(mcfg, text_encoder if mcfg.use_dialogue else None, tcfg.context_length,
                            (tcfg.render_width, tcfg.render_height), None)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"spec": spec.to_dict(), "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
                "init_checkpoint": str(init) if init else None, "data": str(data_dir)}

    if init is not None:
        best = finetune_what(init, mcfg, splits["train"], splits["val"], featurizer, tcfg, run_dir)
    else:
        from .model import PolicyModel

        seed_everything(tcfg.seed, tcfg.deterministic)
        best = train(PolicyModel(mcfg), splits["train"], splits["val"], featurizer, tcfg, run_dir)

    model, ckpt = load_checkpoint(best)
    model.to(torch.device(tcfg.device))
    summary = {"best_epoch": ckpt["epoch"], ckpt["metric_name"]: ckpt["monitored_metric"]}
    for split in ("val", "test"):
        dump = predict_dump(model, splits[split], featurizer, tcfg.batch_size, tcfg.device)
        dump.save(dump_path(run_dir, split))
        try:
            row = metrics_from_dump(dump, mcfg.variant, mcfg.inputs_label())
            summary[f"{split}_metrics"] = row.values()
            if mcfg.has_action_heads:
                summary[f"{split}_per_action_ap"] = per_action_ap_from_dump(dump)
        except ValueError as exc:
            summary[f"{split}_metrics_error"] = str(exc)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    # written last: its presence marks a completed run
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return run_dir


def _train_worker(args: tuple[dict, RunOptions]) -> str:
    spec_dict, opts = args
    return str(cmd_train(ExperimentSpec.from_dict(spec_dict), opts))


def train_grid(specs: Sequence[ExperimentSpec], opts: RunOptions, jobs: int = 1) -> list[Path]:
    """Run specs in dependency order; with ``jobs > 1`` each wave runs in parallel."""
    remaining = list(specs)
    done: set[str] = set()
    names = {s.name for s in specs}
    out: list[Path] = []
    while remaining:
        wave = [s for s in remaining if s.init_from is None or s.init_from not in names or s.init_from in done]
        if not wave:
            raise ConfigError(f"circular init_from among {[s.name for s in remaining]}")
        if jobs > 1 and len(wave) > 1:
            import multiprocessing as mp

            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
                out += [Path(p) for p in pool.map(_train_worker, [(s.to_dict(), opts) for s in wave])]
        else:
            out += [cmd_train(s, opts) for s in wave]
        done |= {s.name for s in wave}
        remaining = [s for s in remaining if s.name not in done]
    return out


# --- report --------------------------------------------------------------------

def cmd_report(run_dirs: Sequence[str | Path], out_dir: str | Path, reference: str | Path | None = None,
               split: str = "test", aggregation: str = "pooled") -> list[dict]:
    from .evaluation import PredictionDump, load_reference, metrics_from_dump, write_report

    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        cfg_file, dump_file = rd / "config.json", dump_path(rd, split)
        if not cfg_file.is_file() or not dump_file.is_file():
            raise DataError(f"{rd}: missing config.json or {dump_file.name} (is the run complete?)")
        mcfg = ModelConfig.from_dict(json.loads(cfg_file.read_text(encoding="utf-8"))["model_config"])
        row = metrics_from_dump(PredictionDump.load(dump_file), mcfg.variant, mcfg.inputs_label(), aggregation)
        row.meta["run"] = rd.name
        rows.append(row)
    ref = None
    if reference is not None:
        if not Path(reference).is_file():
            raise DataError(f"reference metrics file not found: {reference}")
        ref = load_reference(reference)
    return write_report(rows, out_dir, ref)


# --- analyze-certainty ---------------------------------------------------------

def cmd_analyze_certainty(run_dir: str | Path, out_dir: str | Path, split: str = "test",
                          figures: bool = True) -> dict:
    from .certainty import run_h2
    from .evaluation import PredictionDump

    run_dir = Path(run_dir)
    cfg_file = run_dir / "config.json"
    if not cfg_file.is_file():
        raise DataError(f"{run_dir}: no config.json (is the run complete?)")
    mcfg = ModelConfig.from_dict(json.loads(cfg_file.read_text(encoding="utf-8"))["model_config"])
    if mcfg.variant != "action_taker" or mcfg.inputs_label() != "G, D" or mcfg.task != "when":
        raise ConfigError(
            f"certainty analysis needs the Task-1 Action-Taker with inputs G, D; "
            f"{run_dir.name} is {mcfg.variant} ({mcfg.inputs_label()}, task={mcfg.task})")
    dump_file = dump_path(run_dir, split)
    if not dump_file.is_file():
        raise DataError(f"{run_dir}: missing {dump_file.name}")
    return run_h2(PredictionDump.load(dump_file), out_dir, figures)


# --- argument parsing ------------------------------------------------------------

def _key_values(items: Sequence[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icr-policies", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="build record files and label statistics")
    s.add_argument("--dataset", required=True, help="CoDraw dataset JSON")
    s.add_argument("--annotation", required=True, help="iCR annotation TSV")
    s.add_argument("--out", required=True, help="output directory for records and statistics")
    s.add_argument("--overwrite", action="store_true", help="replace differing existing outputs")

    s = sub.add_parser("train", help="train one spec or a grid of specs")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="JSON file with one spec (or a list)")
    src.add_argument("--grid", nargs="?", const="default", help="grid JSON (default: the shipped grid)")
    s.add_argument("--only", nargs="+", help="restrict to these run names")
    s.add_argument("--dataset", help="prepared data directory (overrides the spec)")
    s.add_argument("--out", default="runs", help="parent directory of the run directories")
    s.add_argument("--seed", type=int)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--device")
    s.add_argument("--text-encoder", help="HuggingFace name/path, or tiny-bert for offline runs")
    s.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="training option overrides")
    s.add_argument("--model-set", nargs="*", metavar="KEY=VALUE", help="model option overrides")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs per dependency wave")
    s.add_argument("--skip-existing", action="store_true")
    s.add_argument("--dry-run", action="store_true", help="validate and list the runs only")

    s = sub.add_parser("report", help="results table over finished runs")
    s.add_argument("runs", nargs="+", help="run directories")
    s.add_argument("--out", required=True)
    s.add_argument("--reference-metrics", help="JSON list of reference values for signed deltas")
    s.add_argument("--split", default="test", choices=("val", "test"))
    s.add_argument("--aggregation", default="pooled", choices=("pooled", "macro"))

    s = sub.add_parser("analyze-certainty", help="certainty analysis of the Action-Taker G, D")
    s.add_argument("run", help="run directory of the Action-Taker G, D")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=("val", "test"))
    s.add_argument("--no-figures", action="store_true")
    return p


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "prepare-data":
        stats = cmd_prepare_data(args.dataset, args.annotation, args.out, args.overwrite)
        print(format_statistics(stats))
    elif args.command == "train":
        specs = load_specs(args.spec if args.spec else
                           (default_grid_path() if args.grid == "default" else args.grid))
        if args.only:
            missing = set(args.only) - {s.name for s in specs}
            if missing:
                raise ConfigError(f"unknown run names: {sorted(missing)}")
            specs = [s for s in specs if s.name in args.only]
        opts = RunOptions(data=args.dataset, out=args.out, seed=args.seed, deterministic=args.deterministic,
                          device=args.device, text_encoder=args.text_encoder,
                          train_overrides=_key_values(args.set), model_overrides=_key_values(args.model_set),
                          skip_existing=args.skip_existing)
        # validate every resolved config before any compute
        for s in specs:
            s.train_config(**opts.train_overrides)
            ExperimentSpec.from_dict({**s.to_dict(), "model": {**s.model, **opts.model_overrides}})
        if args.dry_run:
            for s in specs:
                print(f"{s.name}\t{s.variant}\t{s.inputs}\t{s.task}\t{s.init_from or '-'}")
            return
        for rd in train_grid(specs, opts, args.jobs):
            print(rd)
    elif args.command == "report":
        from .evaluation import format_table

        table = cmd_report(args.runs, args.out, args.reference_metrics, args.split, args.aggregation)
        print(format_table(table))
    elif args.command == "analyze-certainty":
        from .certainty import table3_rows

        report = cmd_analyze_certainty(args.run, args.out, args.split, not args.no_figures)
        w = csv.writer(sys.stdout)
        w.writerows(table3_rows(report))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    from .training import TrainingError

    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
