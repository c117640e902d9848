"""``mddradar`` command line: generate, train, matrix, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 I/O or file-format error.  Every command that writes a directory
also writes ``config-echo.json`` with everything needed to rerun it.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import synthdata as sd
from . import train as tr
from . import verify as vf
from .model import CheckpointFormatError, save_checkpoint
from .numerics import ContractError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

DATASET_FILES = {
    "s_train": "S_train.mdd",
    "t_train": "T_train.mdd",
    "s_test": "S_test.mdd",
    "t_test": "T_test.mdd",
}

# run-config keys that are not TrainingConfig fields
DATA_KEYS = {
    "data_dir": None,
    "config_s": "I",
    "config_t": "III",
    "n_train": 200,
    "n_test": 80,
    "k": 5,
    "data_seed": 0,
    "shape": [16, 32],
    **{key: name for key, name in DATASET_FILES.items()},
}

log = logging.getLogger("mddradar")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config handling -----------------------------------------------------


def resolve_config(name_or_path: str) -> sd.RadarConfigSpec:
    """Preset name (I-IV) or a JSON file with :class:`RadarConfigSpec` fields."""
    if name_or_path in sd.PRESETS:
        return sd.PRESETS[name_or_path]
    path = Path(name_or_path)
    if not path.suffix == ".json":
        raise UsageError(f"unknown preset {name_or_path!r}; choose from {sorted(sd.PRESETS)} or pass a .json spec")
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read radar spec {path}: {exc.strerror}") from exc
    allowed = {f.name for f in dataclasses.fields(sd.RadarConfigSpec)}
    unknown = set(raw) - allowed
    if unknown:
        raise UsageError(f"{path}: unknown radar spec keys {sorted(unknown)}")
    try:
        return sd.RadarConfigSpec(**raw)
    except (TypeError, ContractError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def load_run_config(path: str) -> tuple[tr.TrainingConfig, dict]:
    """Parse and validate a run config; returns the training config and the data settings."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read run config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: run config must be a JSON object")
    train_keys = tr.TrainingConfig.field_names()
    unknown = set(raw) - train_keys - set(DATA_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        cfg = tr.TrainingConfig(**{k: v for k, v in raw.items() if k in train_keys})
    except (TypeError, ContractError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    data = {**DATA_KEYS, **{k: v for k, v in raw.items() if k in DATA_KEYS}}
    if data["n_train"] < data["k"] or data["n_test"] < data["k"]:
        raise UsageError(f"{path}: n_train and n_test must be >= k")
    return cfg, data


def _data_root(explicit: str | None, data: dict | None = None) -> Path:
    for candidate in (explicit, (data or {}).get("data_dir"), os.environ.get("MDD_DATA_DIR")):
        if candidate:
            return Path(candidate)
    return Path(".")


def _write_echo(out: Path, payload: dict) -> None:
    (out / "config-echo.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _shape(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 16x32, got {text!r}") from None
    if h < 2 or w < 2:
        raise argparse.ArgumentTypeError("shape entries must be >= 2")
    return h, w


# --- commands ------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n_train < args.k or args.n_test < args.k:
        raise UsageError("--n-train and --n-test must be >= --k")
    cfg_s = resolve_config(args.config_s)
    cfg_t = resolve_config(args.config_t)
    out = _mkdir(_data_root(args.out))
    sets = sd.make_domain_pair(cfg_s, cfg_t, args.n_train, args.n_test, args.k, args.seed, args.shape)
    for key, ds in zip(DATASET_FILES, sets):
        crc = sd.save_dataset(ds, out / DATASET_FILES[key])
        print(f"{crc:08x}  {DATASET_FILES[key]}")
    _write_echo(out, {
        "command": "generate",
        "config_s": dataclasses.asdict(cfg_s),
        "config_t": dataclasses.asdict(cfg_t),
        "n_train": args.n_train,
        "n_test": args.n_test,
        "k": args.k,
        "seed": args.seed,
        "shape": list(args.shape),
    })
    return EXIT_OK


def _load_sets(root: Path, data: dict) -> dict:
    sets = {}
    for key in DATASET_FILES:
        path = root / data[key]
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        sets[key] = sd.load_dataset(path)
    return sets


def cmd_train(args) -> int:
    cfg, data = load_run_config(args.run_config)
    root = _data_root(args.data_dir, data)
    sets = _load_sets(root, data)
    out = _mkdir(Path(args.out))
    evals = (sets["s_test"], sets["t_test"])
    if args.mode == "source-only":
        result = tr.train_source_only(sets["s_train"], cfg, evals)
    else:
        result = tr.train_mdd(sets["s_train"], sets["t_train"], cfg, evals)
    save_checkpoint(result.net, out / "checkpoint.mddnet")
    result.write_metrics_csv(out / "metrics.csv")
    summary = tr.summarize(result, sets["s_test"], sets["t_test"], cfg)
    tr.write_summary(summary, out / "summary.json")
    _write_echo(out, {
        "command": "train",
        "mode": args.mode,
        "run_config": {**cfg.to_dict(), **data, "data_dir": str(root)},
    })
    print(f"{args.mode}: source acc {summary['source_accuracy']:.3f}, target acc {summary['target_accuracy']:.3f}")
    bound = summary.get("bound")
    if bound:
        print(f"bound gap {bound['bound_gap']:.4f} ({bound['bound_gap_sign']})")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg, data = load_run_config(args.run_config)
    names = [n.strip() for n in args.configs.split(",") if n.strip()]
    if len(names) < 2 or len(set(names)) != len(names):
        raise UsageError("--configs needs at least two distinct configurations")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    configs = [resolve_config(n) for n in names]
    spec = tr.DataSpec(data["n_train"], data["n_test"], data["k"], data["data_seed"], tuple(data["shape"]))
    out = _mkdir(Path(args.out))
    matrix = tr.accuracy_matrix(configs, cfg, spec, jobs=args.jobs)
    tr.write_matrix_csv(matrix, out / "matrix.csv", key="mdd")
    tr.write_matrix_csv(matrix, out / "baseline_matrix.csv", key="baseline")
    tr.write_pairs_csv(matrix, out / "pairs.csv")
    _write_echo(out, {
        "command": "matrix",
        "configs": [dataclasses.asdict(c) for c in configs],
        "run_config": {**cfg.to_dict(), **data},
    })
    for cell in matrix["cells"]:
        print(f"{cell['source']} -> {cell['target']}: baseline {100 * cell['baseline']:.1f}%  mdd {100 * cell['mdd']:.1f}%")
    return EXIT_OK


MUTANTS = {"flipped-ramp": vf.flipped_ramp}


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    phi = MUTANTS[args.mutant] if args.mutant else vf.losses.margin_indicator
    results = vf.run_suites(args.suite, args.trials, args.seed, phi)
    for res in results:
        print(res.line())
        for note in res.notes:
            print(f"  {note}")
        if not res.passed:
            print("  counterexample: " + json.dumps(res.counterexample, sort_keys=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# --- parser --------------------------------------------------------------


def build_parser() -> ArgParser:
    parser = ArgParser(prog="mddradar", description="Margin disparity discrepancy on synthetic FMCW radar spectrograms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    gen = sub.add_parser("generate", help="write S/T train/test dataset files")
    gen.add_argument("--config-s", default="I", help="source preset (I-IV) or radar spec .json")
    gen.add_argument("--config-t", default="III", help="target preset (I-IV) or radar spec .json")
    gen.add_argument("--n-train", type=int, default=200)
    gen.add_argument("--n-test", type=int, default=80)
    gen.add_argument("--k", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--shape", type=_shape, default=(16, 32), help="map size HxW, e.g. 16x32 or 64x128")
    gen.add_argument("--out", default=None, help="output directory (default $MDD_DATA_DIR or .)")
    gen.set_defaults(func=cmd_generate)

    trn = sub.add_parser("train", help="train one model from dataset files")
    trn.add_argument("--run-config", required=True)
    trn.add_argument("--mode", choices=("source-only", "mdd"), default="mdd")
    trn.add_argument("--data-dir", default=None, help="dataset directory (default: run config, $MDD_DATA_DIR, .)")
    trn.add_argument("--out", required=True)
    trn.set_defaults(func=cmd_train)

    mat = sub.add_parser("matrix", help="accuracy matrix over every ordered configuration pair")
    mat.add_argument("--configs", default="I,II,III,IV")
    mat.add_argument("--run-config", required=True)
    mat.add_argument("--out", required=True)
    mat.add_argument("--jobs", type=int, default=1)
    mat.set_defaults(func=cmd_matrix)

    ver = sub.add_parser("verify", help="run the loss and gradient property suites")
    ver.add_argument("--suite", choices=vf.SUITES + ("all",), default="all")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--trials", type=int, default=1000)
    ver.add_argument("--mutant", choices=sorted(MUTANTS), default=None, help=argparse.SUPPRESS)
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"mddradar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"mddradar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, sd.DatasetFormatError, CheckpointFormatError) as exc:
        print(f"mddradar: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
