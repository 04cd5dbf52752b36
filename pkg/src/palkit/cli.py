"""Command-line entry point: ``palkit {params,schedule,train,eval,gradcheck}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from palkit import adapters as ad
from palkit.config import (
    AUTO_VOCAB,
    ConfigError,
    ExperimentConfig,
    config_to_dict,
    dump_config,
    load_config,
    resolve,
)
from palkit.encoder import load_checkpoint, save_checkpoint
from palkit.gradcheck import MAX_GRADCHECK_DIM, default_cases, run_gradchecks
from palkit.model import HeadSpec, MultiTaskModel
from palkit.numerics import corrupt_backward
from palkit.scheduler import (
    MetricsWriter,
    SamplerState,
    TrainingDiverged,
    evaluate_all,
    lr_at,
    summarize,
    train,
)
from palkit.tasks import SPECIALS, SYNTH_VOCAB_SIZE, synth_spec

log = logging.getLogger("palkit")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class NumericalFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir if cfg else "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config, args.override)
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    return cfg


def _head_outputs(cfg: ExperimentConfig) -> list[int]:
    outs = []
    for src in cfg.tasks:
        if src.family is not None:
            outs.append(synth_spec(src.family, src.name).n_outputs)
        else:
            outs.append(1 if src.output_kind == "regression" else src.n_classes)
    return outs or [2] * cfg.model.n_tasks


def _data_root(args) -> Path | None:
    return Path(args.config).parent if args.data_relative else None


def _static_model(cfg: ExperimentConfig, base_dir: Path | None):
    """Model config for commands that need no data; synthetic vocabularies are known in advance."""
    model = cfg.model
    if model.vocab_size == AUTO_VOCAB:
        if cfg.tasks and any(s.family is None for s in cfg.tasks):
            return resolve(cfg, base_dir).config.model
        model = replace(model, vocab_size=len(SPECIALS) + SYNTH_VOCAB_SIZE)
    return model


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_params(args) -> int:
    cfg = _load(args)
    model = _static_model(cfg, _data_root(args))
    report = ad.count_parameters(cfg.adapter, model, model.n_tasks, _head_outputs(cfg))
    verdict = ad.check_budget(report)
    print(f"family: {report.family}  tasks: {report.n_tasks}  d_m: {model.d_m}  layers: {model.n_layers}")
    for row in report.rows():
        print(f"  {row['item']:<20} {row['count']:>14,}")
    print(f"  {'formula_matches':<20} {str(report.formula_matches):>14}")
    print(f"  {'ratio':<20} {report.ratio:>14.4f}")
    status = "PASS" if verdict.passed else "FAIL"
    print(f"{report.per_task_quadratic:,}/task; {report.quadratic_total:,} total; {status} "
          f"({report.ratio:.2f}x vs {verdict.limit_ratio:.2f}x)")
    if args.out:
        rows = [(r["item"], r["count"]) for r in report.rows()]
        rows += [("ratio", repr(report.ratio)), ("verdict", status)]
        _write_csv(_out_dir(args, cfg) / "params.csv", ("item", "count"), rows)
    if not report.formula_matches:
        print(f"error: closed form {report.per_task_formula:,} disagrees with the shape walk "
              f"{report.per_task_quadratic:,}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _task_sizes(cfg: ExperimentConfig, base_dir: Path | None = None) -> tuple[int, ...]:
    if cfg.sampler.task_sizes:
        return cfg.sampler.task_sizes
    if cfg.tasks and all(s.family is not None for s in cfg.tasks):
        return tuple(s.size for s in cfg.tasks)
    if cfg.tasks:
        return tuple(len(td.train) for td in resolve(cfg, base_dir).tasks)
    raise ConfigError("schedule needs sampler.task_sizes or a task list")


def schedule_tables(cfg: ExperimentConfig, lr_points: int = 10, base_dir: Path | None = None):
    """Sampling probabilities per epoch and learning-rate samples; no randomness involved."""
    sizes = _task_sizes(cfg, base_dir)
    sampler = replace(cfg.sampler, task_sizes=sizes)
    state = SamplerState(sampler, cfg.run.total_steps)
    n_epochs = state.epochs if sampler.strategy == "annealed" else 1
    prob_rows = []
    for e in range(1, n_epochs + 1):
        if sampler.strategy == "round_robin":
            alpha, probs = float("nan"), np.full(len(sizes), 1.0 / len(sizes))
        else:
            alpha = state.alpha_for(e)
            probs = state._probs_for(e)
        prob_rows.append((e, alpha, *probs.tolist()))
    total = cfg.run.total_steps
    steps = {round(total * i / lr_points) for i in range(lr_points + 1)}
    warm = cfg.run.warmup_steps
    if float(warm).is_integer():
        steps.add(int(warm))
    lr_rows = [(s, lr_at(s, cfg.run)) for s in sorted(steps)]
    return prob_rows, lr_rows


def cmd_schedule(args) -> int:
    cfg = _load(args)
    prob_rows, lr_rows = schedule_tables(cfg, args.lr_points, _data_root(args))
    n = len(prob_rows[0]) - 2
    prob_header = ("epoch", "alpha", *[f"p{i + 1}" for i in range(n)])
    print(",".join(prob_header))
    for row in prob_rows:
        print(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]))
    print()
    print("step,lr")
    for s, lr in lr_rows:
        print(f"{s},{lr!r}")
    if args.out:
        out = _out_dir(args, cfg)
        _write_csv(out / "schedule_sampling.csv", prob_header,
                   [(r[0], *[repr(float(v)) for v in r[1:]]) for r in prob_rows])
        _write_csv(out / "schedule_lr.csv", ("step", "lr"), [(s, repr(lr)) for s, lr in lr_rows])
    return EXIT_OK


def _build_model(resolved, seed: int) -> MultiTaskModel:
    cfg = resolved.config
    heads = [HeadSpec(td.spec.n_outputs, td.spec.output_kind == "regression") for td in resolved.tasks]
    return MultiTaskModel(cfg.model, cfg.adapter, heads, seed=seed, init_std=cfg.init_std)


def run_training(cfg: ExperimentConfig, out: Path, base_dir: Path | None = None) -> dict:
    """One run per seed: metrics CSV and best checkpoint per seed, then a summary CSV."""
    resolved = resolve(cfg, base_dir)
    cfg = resolved.config
    (out / "resolved_config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    names = [td.spec.name for td in resolved.tasks]
    per_seed: dict[int, dict[str, float]] = {}
    for seed in cfg.seeds:
        model = _build_model(resolved, seed)
        log.info("seed %d: training %d steps on %d tasks", seed, cfg.run.total_steps, len(names))
        with open(out / f"metrics_seed{seed}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = MetricsWriter(fh)
            result = train(model, resolved.tasks, cfg.sampler, cfg.run, seed=seed, on_rows=writer.write)
        meta = {"seed": seed, "best_step": result.best_step, "best_score": result.best_score,
                "best_scores": result.best_scores, "config": config_to_dict(cfg)}
        save_checkpoint(out / f"best_seed{seed}.npz", result.best_state, meta)
        scores = result.best_scores or evaluate_all(model, resolved.tasks, cfg.run.eval_batch_size)
        per_seed[seed] = scores
        log.info("seed %d: best step %s, dev average %s", seed, result.best_step,
                 _fmt(float(np.mean(list(scores.values())))))
    rows = []
    summary = {}
    for i, name in enumerate(names + ["average"]):
        if name == "average":
            vals = [float(np.mean([per_seed[s][n] for n in names])) for s in cfg.seeds]
            metric = "score"
        else:
            vals = [per_seed[s][name] for s in cfg.seeds]
            metric = resolved.tasks[i].spec.metric
        mean, se = summarize(vals)
        summary[name] = (mean, se)
        rows.append((name, metric, repr(mean), repr(se), len(vals), ";".join(repr(v) for v in vals)))
    _write_csv(out / "summary.csv", ("task", "metric", "mean", "stderr", "n_seeds", "per_seed"), rows)
    return {"summary": summary, "per_seed": per_seed}


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    try:
        res = run_training(cfg, out, _data_root(args))
    except TrainingDiverged as exc:
        raise NumericalFailure(f"training diverged: {exc}") from exc
    print(f"{'task':<16} {'mean':>8} {'stderr':>8}")
    for name, (mean, se) in res["summary"].items():
        print(f"{name:<16} {_fmt(mean):>8} {_fmt(se):>8}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    resolved = resolve(cfg, _data_root(args))
    state, meta = load_checkpoint(args.checkpoint)
    stored = meta.get("config", {})
    current = config_to_dict(resolved.config)
    for key in ("model", "adapter"):
        if key in stored and stored[key] != current[key]:
            raise ConfigError(f"checkpoint {key} configuration does not match --config")
    for td in resolved.tasks:
        if len(td.dev) == 0:
            raise ConfigError(f"task {td.spec.name!r}: empty dev set")
    heads = [HeadSpec(td.spec.n_outputs, td.spec.output_kind == "regression") for td in resolved.tasks]
    c = resolved.config
    try:
        model = MultiTaskModel(c.model, c.adapter, heads, seed=0, init_std=c.init_std, state=state)
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks parameters the config needs: {exc}") from None
    scores = evaluate_all(model, resolved.tasks, c.run.eval_batch_size)
    avg = float(np.mean(list(scores.values())))
    print(f"{'task':<16} {'metric':<10} {'value':>8}")
    for td in resolved.tasks:
        print(f"{td.spec.name:<16} {td.spec.metric:<10} {_fmt(scores[td.spec.name]):>8}")
    print(f"{'average':<16} {'score':<10} {_fmt(avg):>8}")
    if args.out:
        rows = [(td.spec.name, td.spec.metric, repr(scores[td.spec.name])) for td in resolved.tasks]
        rows.append(("average", "score", repr(avg)))
        _write_csv(_out_dir(args, cfg) / "eval.csv", ("task", "metric", "value"), rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    d_m = args.d_m
    if args.config:
        d_m = _load(args).model.d_m
    if d_m > MAX_GRADCHECK_DIM:
        raise ConfigError(f"gradient checks need d_m <= {MAX_GRADCHECK_DIM}, got {d_m}")
    cases = default_cases()
    if args.family:
        wanted = set(args.family)
        cases = [c for c in cases if c.label in wanted or c.spec.family in wanted]
        if not cases:
            raise ConfigError(f"no gradient-check case matches {sorted(wanted)}")
    max_coords = None if args.full else args.coords
    if args.corrupt:
        with corrupt_backward(*args.corrupt):
            results = run_gradchecks(cases, d_m, args.tol, max_coords=max_coords)
    else:
        results = run_gradchecks(cases, d_m, args.tol, max_coords=max_coords)
    failed = 0
    for r in results:
        name, err = r.report.worst
        status = "pass" if r.report.passed else "FAIL"
        failed += not r.report.passed
        extra = "" if r.report.passed else f"  failing: {', '.join(r.report.failures[:4])}"
        print(f"{r.label:<26} {status}  worst {err:.3e} ({name}){extra}")
    print(f"{len(results) - failed}/{len(results)} families pass at tol {args.tol:g}")
    if failed:
        raise NumericalFailure(f"{failed} gradient check(s) failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed expects comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palkit", description="Adapter budgets, schedules, multi-task training and gradient checks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=_seed_list, help="comma-separated seeds, replacing the config's list")
    common.add_argument("--out", help="output directory (default: the config's output_dir)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config entry, e.g. run.total_steps=200 (repeatable)")
    common.add_argument("--data-relative", action="store_true",
                        help="resolve TSV paths relative to the config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", parents=[common], help="parameter budget report")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("schedule", parents=[common], help="sampling and learning-rate schedule tables")
    p.add_argument("--lr-points", type=int, default=10)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", parents=[common], help="train one model per seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the config's dev sets")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every adapter family")
    p.add_argument("--d-m", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--family", action="append", help="restrict to these families or case labels")
    p.add_argument("--coords", type=int, default=12, help="entries differenced per tensor")
    p.add_argument("--full", action="store_true", help="difference every entry of every tensor")
    p.add_argument("--corrupt", action="append", metavar="OP",
                   help="negate the backward pass of OP (negative control)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
