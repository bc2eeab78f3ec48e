"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import experiments
from .config import ConfigError, RunConfig, load_run_config
from .model import CheckpointError, load_checkpoint, predict
from .structures import EV_PER_A3_TO_GPA, FrameFormatError, load_structure, parse_frames, split_dataset, write_frames
from .synthdata import make_dataset
from .train import TrainingError, evaluate, train, write_history_csv

logger = logging.getLogger("mfforce")


class UsageError(Exception):
    """Bad input from the user: exit code 2."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _load_frames(path, n_fidelities: int | None = None):
    try:
        return parse_frames(path, n_fidelities)
    except FileNotFoundError as exc:
        raise UsageError(f"data file not found: {path}") from exc
    except FrameFormatError as exc:
        raise UsageError(str(exc)) from exc


def _ensure_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synth(args) -> int:
    if args.n_lf < 0 or args.n_hf < 0:
        raise UsageError("--n-lf and --n-hf must be non-negative")
    frames = make_dataset(args.n_lf, args.n_hf, args.seed, atoms_range=(args.min_atoms, args.max_atoms))
    write_frames(frames, args.out)
    counts = Counter(fr.fidelity for fr in frames)
    print(_dump({"frames": len(frames), "per_fidelity": {str(f): counts[f] for f in sorted(counts)}}))
    return 0


def cmd_show_config(args) -> int:
    print(_dump(load_run_config(args.config).to_dict()))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    data = args.data or run.data
    out = args.out or run.out
    if data is None or out is None:
        raise UsageError("--data and --out are required (or set data/out in the config)")
    cfg = run.train
    frames = _load_frames(data, cfg.fidelity.n_fidelities)
    if not frames:
        raise UsageError(f"dataset {data} is empty")
    train_frames, test_frames = split_dataset(frames, run.test_fraction, cfg.seed)
    out_dir = _ensure_dir(out)
    result = train(train_frames, cfg, checkpoint_path=out_dir / "checkpoint.json")
    write_history_csv(result.history, out_dir / "metrics.csv")
    summary = {
        "config": run.to_dict(),
        "n_train": len(result.train_frames),
        "n_val": len(result.val_frames),
        "n_test": len(test_frames),
        "steps": result.steps,
        "test": evaluate(result.model, test_frames).to_dict() if test_frames else None,
    }
    (out_dir / "summary.json").write_text(_dump(summary) + "\n", encoding="utf-8")
    print(_dump({"checkpoint": str(out_dir / "checkpoint.json"), "test": summary["test"]}))
    return 0


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    frames = _load_frames(args.data, model.n_fidelities)
    if not frames:
        raise UsageError(f"dataset {args.data} is empty")
    print(_dump(evaluate(model, frames).to_dict()))
    return 0


def cmd_predict(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    if not 1 <= args.fidelity <= model.n_fidelities:
        raise UsageError(f"--fidelity {args.fidelity} outside [1, {model.n_fidelities}]")
    try:
        structure = load_structure(args.structure)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read structure {args.structure}: {exc}") from exc
    pred = predict(structure, args.fidelity, model)
    print(
        _dump(
            {
                "fidelity": args.fidelity,
                "energy_eV": pred.energy,
                "forces_eV_per_A": pred.forces.tolist(),
                "stress_eV_per_A3": pred.stress.tolist(),
                "stress_GPa": (pred.stress * EV_PER_A3_TO_GPA).tolist(),
                "magmoms_muB": pred.magmoms.tolist(),
            }
        )
    )
    return 0


def _lf_hf(args, run: RunConfig):
    lf_path = args.data_lf or run.data_lf
    hf_path = args.data_hf or run.data_hf
    if lf_path is None or hf_path is None:
        raise UsageError("--data-lf and --data-hf are required (or set them in the config)")
    n_f = run.train.fidelity.n_fidelities
    lf = [fr.with_fidelity(experiments.LF) for fr in _load_frames(lf_path)]
    hf = [fr.with_fidelity(experiments.HF) for fr in _load_frames(hf_path)]
    if not lf or not hf:
        raise UsageError("both datasets must be non-empty")
    if n_f != 2:
        raise UsageError("two-dataset workflows need fidelity.n_fidelities = 2")
    if run.n_lf is not None:
        lf = lf[: run.n_lf]
    return lf, hf


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    out = args.out or run.out
    if out is None:
        raise UsageError("--out is required")
    lf, hf = _lf_hf(args, run)
    hf_train, hf_test = experiments.reserve_test(hf, run.test_fraction, run.train.seed)
    records = experiments.ablate(lf, hf_train, run.train, seeds=run.seeds, hf_test=hf_test)
    rows = experiments.summarize(records, keys=("method",))
    experiments.write_csv(rows, experiments.summary_columns(("method",)), out)
    print(_dump({"configurations": [r["method"] for r in rows], "out": str(out)}))
    return 0


def cmd_transfer(args) -> int:
    run = load_run_config(args.config)
    out = args.out or run.out
    if out is None:
        raise UsageError("--out is required")
    lf, hf = _lf_hf(args, run)
    hf_train, hf_test = experiments.reserve_test(hf, run.test_fraction, run.train.seed)
    points = [n for n in run.sweep_n_hf if n <= len(hf_train)]
    skipped = [n for n in run.sweep_n_hf if n > len(hf_train)]
    if skipped:
        logger.warning("skipping sweep points %s: only %d HF training frames", skipped, len(hf_train))
    if not points:
        raise UsageError("no sweep point fits the available high-fidelity frames")
    manifest: dict = {}
    records = experiments.compare_transfer(
        lf, hf_train, hf_test, points, len(lf), run.train, seeds=run.seeds, manifest=manifest
    )
    logger.info("frozen during fine-tuning: %s", ", ".join(manifest["frozen"]))
    rows = experiments.summarize(records, keys=("n_hf", "method"))
    experiments.write_csv(rows, experiments.summary_columns(("n_hf", "method")), out)
    manifest_path = Path(out).with_suffix(".frozen.json")
    manifest_path.write_text(_dump(manifest) + "\n", encoding="utf-8")
    print(_dump({"out": str(out), "manifest": str(manifest_path), "sweep_n_hf": points}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfforce", description="Multi-fidelity graph network force field.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic two-fidelity dataset (JSON lines)")
    p.add_argument("--n-lf", type=int, required=True, help="number of low-fidelity frames (fidelity 1)")
    p.add_argument("--n-hf", type=int, required=True, help="number of high-fidelity frames (fidelity 2)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--min-atoms", type=int, default=8, help="smallest cell before vacancies (default 8)")
    p.add_argument("--max-atoms", type=int, default=56, help="largest cell before vacancies (default 56)")
    p.add_argument("--out", required=True, help="output frame file")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("show-config", help="print the effective run configuration")
    p.add_argument("--config", help="JSON config file (defaults when omitted)")
    p.set_defaults(func=cmd_show_config)

    p = sub.add_parser("train", help="fit composition weights and train the network")
    p.add_argument("--config", help="JSON config file (defaults when omitted)")
    p.add_argument("--data", help="frame file with mixed fidelities")
    p.add_argument("--out", help="output directory for checkpoint.json, metrics.csv, summary.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report MAE/RMSE of a checkpoint on a frame file")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    p.add_argument("--data", required=True, help="frame file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict energy, forces, stress and magmoms of one structure")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    p.add_argument("--structure", required=True, help="JSON object with lattice, species, positions")
    p.add_argument("--fidelity", type=int, required=True, help="fidelity to predict at (1-based)")
    p.set_defaults(func=cmd_predict)

    for name, func, text in (
        ("ablate", cmd_ablate, "run the ten fidelity-mechanism configurations and write a CSV"),
        ("transfer", cmd_transfer, "compare frozen-layer transfer learning with multi-fidelity training"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--data-lf", help="low-fidelity frame file")
        p.add_argument("--data-hf", help="high-fidelity frame file")
        p.add_argument("--out", help="output CSV path")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
