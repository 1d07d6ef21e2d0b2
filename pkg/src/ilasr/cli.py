"""Command-line entry point: ``ilasr <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import generate_task, load_task_spec, read_dataset, write_dataset
from .errors import ConfigError, DataFormatError, NumericalAbort
from .harness import (INCREMENTAL, RunManifest, StageConfig, analyze_correlation, evaluate,
                      run_sequence, sweep, train_stage)
from .model import load_checkpoint

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4

log = logging.getLogger("ilasr")


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stage_config(path: str) -> StageConfig:
    return StageConfig.from_dict(_read_json(path), base_dir=Path(path).resolve().parent)


def _run_stage(cfg: StageConfig) -> None:
    out = Path(cfg.output_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out.with_suffix(".config.json"), cfg.to_dict())
    res = train_stage(cfg)
    for name, rep in res.reports.items():
        print(f"{name}: CER {100 * rep.corpus_cer:.2f}% over {len(rep.samples)} samples")
    print(f"wrote {out}")


def cmd_gen_data(args) -> None:
    spec = load_task_spec(args.spec)
    if args.task_id:
        spec.task_id = args.task_id
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(generate_task(spec), out)
    _write_json(out.with_suffix(".spec.json"), spec.to_dict())
    print(f"wrote {spec.num_samples} samples of task {spec.task_id} to {out}")


def cmd_pretrain(args) -> None:
    cfg = _stage_config(args.config)
    if cfg.method != "pretrain":
        raise ConfigError(f"pretrain expects method 'pretrain', config has {cfg.method!r}")
    _run_stage(cfg)


def cmd_incr_train(args) -> None:
    cfg = _stage_config(args.config)
    if cfg.method not in INCREMENTAL + ("joint",):
        raise ConfigError(f"incr-train expects an incremental or joint method, got {cfg.method!r}")
    _run_stage(cfg)


def cmd_run_seq(args) -> None:
    m = RunManifest.from_dict(_read_json(args.manifest), base_dir=Path(args.manifest).resolve().parent)
    res = run_sequence(m)
    print(res.table3_csv(), end="")
    print(f"config hash {res.config_hash}; outputs in {m.out_dir}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    rep = evaluate(ckpt, read_dataset(args.data), teacher=teacher, meta=dict(ckpt.meta))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_csv())
    out.with_suffix(".summary.json").write_text(rep.summary_text())
    print(rep.summary_text(), end="")


def cmd_sweep(args) -> None:
    cfg = _stage_config(args.config)
    values = None
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    out_dir = args.out_dir or str(Path(cfg.output_checkpoint).parent)
    _write_json(Path(out_dir) / f"sweep_{args.axis}.config.json",
                dict(cfg.to_dict(), sweep_axis=args.axis, sweep_values=values))
    points = sweep(cfg, args.axis, values, out_dir=out_dir)
    print(Path(out_dir, f"sweep_{args.axis}.csv").read_text(), end="")
    log.info("%d sweep points written to %s", len(points), out_dir)


def cmd_analyze(args) -> None:
    rep = analyze_correlation(load_checkpoint(args.student), load_checkpoint(args.teacher),
                              read_dataset(args.data), n_samples=args.n, seed=args.seed)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.report.to_csv())
        _write_json(out.with_suffix(".summary.json"), rep.summary())
    print(json.dumps(rep.summary(), indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilasr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset from a task spec or recipe")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task-id")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="train a model from scratch on one task")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("incr-train", help="run one incremental (or joint) stage")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_incr_train)

    s = sub.add_parser("run-seq", help="pretrain, then walk the task sequence with every method")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_run_seq)

    s = sub.add_parser("eval", help="greedy-decode a dataset and write per-sample CER")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--teacher", help="also record per-sample EBKD loss against this model")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="vary T, beta or gamma of an ebkd_rbkd stage")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["T", "beta", "gamma"])
    s.add_argument("--values", help="comma-separated; defaults to the standard grid")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("analyze", help="correlate per-sample CER with per-sample EBKD loss")
    s.add_argument("--student", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="per-sample CSV path")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
