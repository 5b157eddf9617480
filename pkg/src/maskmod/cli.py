"""Command-line interface.

Every command is a thin composition of library calls.  Tabular output goes
to stdout as tab-separated lines; failures exit nonzero with a single
``error<TAB>Kind<TAB>message`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, load_config
from .data import DatasetSpec, load_dataset
from .evaluate import DecathlonConfig, decathlon_score, error_rate, mask_density
from .masks import SURROGATES, VARIANTS
from .registry import BaselineParams, TaskNetwork, TaskParams, add_task, measured_payload_bytes, overhead

log = logging.getLogger("maskmod")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _emit(*fields) -> None:
    print("\t".join(str(f) for f in fields))


def _parse_learn_k(text: str):
    if text is None:
        return None
    text = text.strip()
    if text in ("", "none"):
        return []
    try:
        return sorted({int(t) for t in text.split(",")})
    except ValueError:
        raise CliError(f"--learn-k expects a comma list of 1,2,3 or 'none', got {text!r}") from None


def _schedule_for(cfg_schedule, deterministic: bool):
    # deterministic mode: batches are assembled synchronously on the main thread
    return replace(cfg_schedule, prefetch=0) if deterministic else cfg_schedule


def _dataset_meta(spec: DatasetSpec, base_dir: Path) -> dict:
    meta = {"dataset": spec.to_dict()}
    if spec.source == "idx":
        meta["data_dir"] = str(Path(base_dir).resolve())
    return meta


def _metrics_path(cfg: RunConfig, explicit, name: str):
    if explicit:
        return Path(explicit)
    if cfg.metrics_dir is not None:
        return cfg.metrics_dir / f"{name}.jsonl"
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    from .experiment import pretrain

    cfg = load_config(args.config)
    if cfg.pretrain is None:
        raise CliError("config has no 'pretrain' dataset")
    cfg = replace(cfg, pretrain_schedule=_schedule_for(cfg.pretrain_schedule, args.deterministic))
    train, test = load_dataset(cfg.pretrain, cfg.base_dir)
    theta = pretrain(cfg, train, test)
    digest = theta.save(args.out)
    _emit("theta", args.out, digest, f"{1 - error_rate(theta, test):.4f}")
    return 0


def cmd_add_task(args) -> int:
    cfg = load_config(args.config)
    overrides = {"schedule": _schedule_for(cfg.schedule, args.deterministic)}
    if args.variant:
        overrides["variant"] = args.variant
    if args.surrogate:
        overrides["surrogate"] = args.surrogate
    if args.channel_wise:
        overrides["channel_wise"] = True
    if args.learn_k is not None:
        overrides["learn_k"] = _parse_learn_k(args.learn_k)
    if args.frozen_bn:
        overrides["task_bn"] = False
    cfg = replace(cfg, **overrides)
    spec = cfg.task_spec(args.task)
    theta = BaselineParams.load(args.theta)
    train, test = load_dataset(spec, cfg.base_dir)
    omega = add_task(
        theta,
        args.task,
        train,
        cfg,
        eval_data=test if args.eval_each_epoch else None,
        metrics_path=_metrics_path(cfg, args.metrics, args.task),
        meta=_dataset_meta(spec, cfg.base_dir),
    )
    raw = omega.save(args.out, theta.arch)
    _emit("omega", args.out, ckpt.digest_of(raw), f"{1 - error_rate(TaskNetwork(theta, omega), test):.4f}")
    return 0


def _task_dataset(omega: TaskParams, split: str, config=None):
    if config is not None:
        cfg = load_config(config)
        spec, base = cfg.task_spec(omega.name), cfg.base_dir
    else:
        if "dataset" not in omega.meta:
            raise CliError(f"task file for {omega.name!r} records no dataset; pass --config")
        spec = DatasetSpec.from_dict(omega.meta["dataset"])
        base = omega.meta.get("data_dir", ".")
    train, test = load_dataset(spec, base)
    return train if split == "train" else test


def _load_max_errors(path) -> DecathlonConfig:
    data = json.loads(Path(path).read_text())
    if "reference_errors" in data:
        return DecathlonConfig.from_reference_errors(data["reference_errors"])
    return DecathlonConfig(data.get("max_errors", data))


def cmd_eval(args) -> int:
    theta = BaselineParams.load(args.theta)
    results = {}
    for path in args.omega:
        omega = TaskParams.load(path)
        data = _task_dataset(omega, args.split, args.config)
        e = error_rate(TaskNetwork(theta, omega), data)
        results[omega.name] = {"error": e, "accuracy": 1 - e, "score": None}
    if args.baseline_errors:
        scores = decathlon_score({t: r["error"] for t, r in results.items()}, _load_max_errors(args.baseline_errors))
        for t, s in scores["tasks"].items():
            results[t]["score"] = s
    for t, r in results.items():
        _emit(t, f"{r['error']:.6f}", f"{r['accuracy']:.6f}", "" if r["score"] is None else f"{r['score']:.3f}")
    if args.report:
        Path(args.report).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_score(args) -> int:
    results = json.loads(Path(args.results).read_text())
    errors = {t: (r["error"] if isinstance(r, dict) else float(r)) for t, r in results.items()}
    dcfg = _load_max_errors(args.baseline_errors)
    scores = decathlon_score(errors, dcfg)
    _emit("task", "error", "max_error", "score")
    for t in sorted(errors):
        _emit(t, f"{errors[t]:.6f}", f"{dcfg.max_errors[t]:.6f}", f"{scores['tasks'][t]:.3f}")
    _emit("total", "", "", f"{scores['total']:.3f}")
    if args.out:
        out = {t: {"error": errors[t], "accuracy": 1 - errors[t], "score": scores["tasks"][t]} for t in errors}
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_analyze(args) -> int:
    from .plotting import plot_density

    omega = TaskParams.load(args.omega)
    report = mask_density(omega)
    out = Path(args.report)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    text = report.render_text()
    out.with_suffix(".txt").write_text(text + "\n")
    if not args.no_plot:
        plot_density(report, out.with_suffix(".png"))
    print(text)
    return 0


def cmd_overhead(args) -> int:
    theta = BaselineParams.load(args.theta)
    omegas = [TaskParams.load(p) for p in args.omegas]
    rep = overhead(theta, omegas)
    _emit("task", "mask_bits", "scalars", "extra_bits", "payload_bytes", "file_payload_bytes")
    for path, row in zip(args.omegas, rep.to_dict()["tasks"]):
        measured = measured_payload_bytes(ckpt.read(path, ckpt.KIND_TASK))
        _emit(row["task"], row["mask_bits"], row["scalars"], row["extra_bits"], row["payload_bytes"], measured)
    _emit("baseline_params", rep.baseline_params)
    _emit("ratio", f"{float(rep.ratio):.6f}", f"{rep.ratio.numerator}/{rep.ratio.denominator}")
    return 0


def cmd_init_config(args) -> int:
    from .experiment import desk_config

    cfg = desk_config(seed=args.seed, n_tasks=args.tasks)
    Path(args.out).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    _emit("config", args.out, ",".join(cfg.tasks))
    return 0


def cmd_experiment(args) -> int:
    from .experiment import default_config, run_trend_experiment

    res = run_trend_experiment(default_config(args.seed), n_tasks=args.tasks)
    regimes = res["regimes"]
    _emit("task", *regimes)
    for t, row in res["tasks"].items():
        _emit(t, *(f"{row[r]:.4f}" for r in regimes))
    _emit("mean", *(f"{res['mean_accuracy'][r]:.4f}" for r in regimes))
    if "decathlon" in res:
        _emit("decathlon", *(f"{res['decathlon'][r]:.1f}" for r in regimes))
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maskmod", description="Add tasks to a frozen network with binary masks and affine weight transforms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="train the baseline on the config's pretrain dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("add-task", help="learn one new task on top of a baseline")
    s.add_argument("--theta", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--surrogate", choices=SURROGATES)
    s.add_argument("--channel-wise", action="store_true")
    s.add_argument("--learn-k", help="comma list of learned k indices (1,2,3) or 'none'")
    s.add_argument("--frozen-bn", action="store_true", help="reuse the baseline batch norms instead of task-owned ones")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="append per-epoch JSON lines here")
    s.add_argument("--eval-each-epoch", action="store_true")
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(fn=cmd_add_task)

    s = sub.add_parser("eval", help="error and accuracy of task files")
    s.add_argument("--theta", required=True)
    s.add_argument("--omega", required=True, nargs="+")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--config", help="take datasets from this config instead of the task files")
    s.add_argument("--baseline-errors", help="JSON of per-task max errors; fills in scores")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("score", help="decathlon score of a results file")
    s.add_argument("--results", required=True)
    s.add_argument("--baseline-errors", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("analyze", help="per-layer mask density and k values")
    s.add_argument("--omega", required=True)
    s.add_argument("--report", required=True, help="JSON path; .txt and .png are written next to it")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("overhead", help="storage of task files relative to the baseline")
    s.add_argument("--theta", required=True)
    s.add_argument("--omegas", required=True, nargs="+")
    s.set_defaults(fn=cmd_overhead)

    s = sub.add_parser("init-config", help="write the desk-scale synthetic config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tasks", type=int, default=3)
    s.set_defaults(fn=cmd_init_config)

    s = sub.add_parser("experiment", help="run the desk-scale regime comparison")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tasks", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.fn(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        msg = " ".join(str(exc).split())
        print(f"error\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return 2 if msg.startswith("usage:") else 1


if __name__ == "__main__":
    sys.exit(main())
