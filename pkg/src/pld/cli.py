"""Command-line entry point: ``pld <subcommand> [options]``.

Exit codes: 0 success, 1 numerical divergence (or a failed gradient check),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2
EFFECTIVE_CONFIG = "effective_config.json"

log = logging.getLogger("pld")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", type=Path, help="JSON training config (keys mirror TrainConfig)")
    p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--variant", choices=("postln", "preln", "st"), help="override the block variant")
    p.add_argument("--theta-bar", type=float, dest="theta_bar", help="override the keep-ratio floor")
    p.add_argument("--steps", type=int, help="override total steps T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pld", description="Progressive layer dropping on a toy masked LM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("train", help="run a training job")
    _common(p, "runs/train")
    p.add_argument("--no-drop", action="store_true", help="full-depth baseline (no layer dropping)")

    p = sub.add_parser("schedule", help="export keep ratio and per-layer probabilities")
    _common(p, "runs/schedule")
    p.add_argument("--layers", type=int, help="override L")
    p.add_argument("--every", type=int, default=1, help="write every k-th step")
    p.add_argument("--poly", type=int, nargs="*", default=[], metavar="DEG",
                   help="add thresholded polynomial reference curves of these degrees")

    p = sub.add_parser("flops", help="export expected FLOPS per step")
    _common(p, "runs/flops")
    p.add_argument("--layers", type=int, help="override L")
    p.add_argument("--every", type=int, default=1, help="write every k-th step")

    p = sub.add_parser("analyze", help="per-layer gradient / similarity profile")
    _common(p, "runs/analyze")
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (default: fresh init)")
    p.add_argument("--layers", type=int, help="override L (fresh init only)")
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("lesion", help="validation loss with randomly removed blocks")
    _common(p, "runs/lesion")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--num-seeds", type=int, default=5)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and the model")
    _common(p, "runs/grad-check")
    p.add_argument("--tol", type=float, default=1e-5)
    return parser


def load_config(args):
    from .training import TrainConfig

    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = TrainConfig.load(args.config)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from None
    else:
        cfg = TrainConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.variant is not None:
        d["model"]["variant"] = args.variant
    if args.steps is not None:
        d["total_steps"] = args.steps
    if getattr(args, "layers", None) is not None:
        d["model"]["L"] = args.layers
    if args.theta_bar is not None:
        d["schedule"] = {**(d["schedule"] or {}), "theta_limit": args.theta_bar}
    if getattr(args, "no_drop", False):
        d["schedule"] = None
    try:
        return TrainConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _echo(out: Path, command: str, cfg, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    (out / EFFECTIVE_CONFIG).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _schedule_for(cfg):
    sched = cfg.drop_schedule()
    if sched is None:
        raise UsageError("this command needs a drop schedule; remove --no-drop / schedule: null")
    return sched


def cmd_train(args, cfg) -> int:
    from .training import DivergenceError, train

    _echo(args.out, "train", cfg)
    try:
        res = train(cfg, args.out)
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    print(f"final val loss {res.final_val_loss:.4f}; block FLOPS fraction "
          f"{res.rows[-1]['block_flops_fraction']:.4f}; outputs in {args.out}")
    return EXIT_OK


def cmd_schedule(args, cfg) -> int:
    from .schedule import schedule_table

    sched = _schedule_for(cfg)
    _echo(args.out, "schedule", cfg, {"every": args.every, "poly": args.poly})
    steps = sorted(set(range(0, sched.total_steps + 1, max(args.every, 1))) | {sched.total_steps})
    header, rows = schedule_table(sched, steps=steps, reference_degrees=args.poly)
    _write_csv(args.out / "schedule.csv", header, rows)
    print(f"wrote {len(rows)} rows to {args.out / 'schedule.csv'}")
    return EXIT_OK


def cmd_flops(args, cfg) -> int:
    from .schedule import block_flops_fraction, expected_depth, flops_per_step, theta_bar

    sched = _schedule_for(cfg)
    _echo(args.out, "flops", cfg, {"every": args.every})
    mc = cfg.model
    steps = sorted(set(range(0, sched.total_steps + 1, max(args.every, 1))) | {sched.total_steps})
    header = ["step", "theta", "expected_depth", "block_flops_fraction", "flops_fraction",
              "cumulative_block_flops_fraction"]
    rows = []
    all_t = np.arange(sched.total_steps + 1)
    # running mean over every step, not just the written ones
    fr = np.array([block_flops_fraction(sched, t) for t in all_t])
    cum = np.cumsum(fr) / (all_t + 1)
    for t in steps:
        rows.append([t, theta_bar(t, sched), expected_depth(sched, t), float(fr[t]),
                     flops_per_step(sched, mc, t), float(cum[t])])
    inf = math.inf
    rows.append(["steady_state", theta_bar(inf, sched), expected_depth(sched, inf),
                 block_flops_fraction(sched, inf), flops_per_step(sched, mc, inf), ""])
    _write_csv(args.out / "flops.csv", header, rows)
    ss = rows[-1]
    print(f"steady state: expected depth {ss[2]:.4f} of {mc.L}, block FLOPS fraction {ss[3]:.4f} "
          f"(saving {100 * (1 - ss[3]):.2f}%), with head {ss[4]:.4f}")
    return EXIT_OK


def _eval_batches(cfg, batch_size: int | None = None, max_batches: int | None = None):
    from .data import MLMData, load_corpus

    data = MLMData(load_corpus(cfg.corpus), cfg.model.S, batch_size or cfg.batch_size, cfg.mask_prob, cfg.seed)
    return data.validation_batches(max_batches if max_batches is not None else cfg.eval_batches)


def cmd_analyze(args, cfg) -> int:
    from .instrumentation import InstrumentationError, profile_layers, write_profiles_csv
    from .training import DivergenceError
    from .transformer import Model

    step = 0
    if args.checkpoint is not None:
        model, extra = _load(args.checkpoint)
        step = int(extra.get("step", 0))
        cfg.model = model.config
    else:
        model = Model.init(cfg.model, cfg.seed, np.float32)
    _echo(args.out, "analyze", cfg, {"checkpoint": args.checkpoint, "batch_size": args.batch_size})
    batch = _eval_batches(cfg, args.batch_size, 1)[0]
    try:
        profiles = profile_layers(model.astype(np.float64), batch)
    except (DivergenceError, InstrumentationError) as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    write_profiles_csv(args.out / "profile.csv", profiles, step, cfg.seed)
    for p in profiles:
        print(f"layer {p.layer:2d}  |dW| {p.weight_grad_norm:.3e}  ratio {p.norm_ratio:.4f}  "
              f"L2 {p.l2_distance:.4f}  angle {p.arccos_deg:6.2f} deg")
    return EXIT_OK


def _load(path: Path):
    from .transformer import CheckpointError, load_checkpoint

    if not (path / "manifest.json").is_file():
        raise UsageError(f"no checkpoint manifest in {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_lesion(args, cfg) -> int:
    from .instrumentation import lesion_eval

    model, _ = _load(args.checkpoint)
    cfg.model = model.config
    theta = args.theta_bar if args.theta_bar is not None else 0.5
    _echo(args.out, "lesion", cfg, {"checkpoint": args.checkpoint, "theta": theta, "num_seeds": args.num_seeds})
    res = lesion_eval(model, theta, _eval_batches(cfg), seeds=range(args.num_seeds))
    rows = [[s, theta, "".join(map(str, g.tolist())), res.full_loss, u, sc]
            for s, g, u, sc in zip(range(args.num_seeds), res.gates, res.unscaled, res.scaled)]
    _write_csv(args.out / "lesion.csv", ["seed", "theta", "gates", "full_loss", "loss_unscaled", "loss_scaled"], rows)
    print(f"full {res.full_loss:.4f}; lesioned unscaled {res.unscaled_mean:.4f} (+{res.inflation():.4f}), "
          f"scaled {res.scaled_mean:.4f} (+{res.inflation(scaled=True):.4f})")
    return EXIT_OK


def cmd_grad_check(args, cfg) -> int:
    from .gradcheck import check_model, run_op_checks

    _echo(args.out, "grad-check", cfg, {"tol": args.tol})
    results = run_op_checks(cfg.seed)
    results += [check_model(v, seed=cfg.seed) for v in ("postln", "preln", "st")]
    rows = [[r.name, name, err, err < args.tol] for r in results for name, err in r.errors.items()]
    _write_csv(args.out / "grad_check.csv", ["check", "input", "relative_error", "passed"], rows)
    ok = all(r.passed(args.tol) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed(args.tol) else 'FAIL'}  {r.name:26s} max rel err {r.max_error:.2e}")
    return EXIT_OK if ok else EXIT_DIVERGED


COMMANDS = {
    "train": cmd_train,
    "schedule": cmd_schedule,
    "flops": cmd_flops,
    "analyze": cmd_analyze,
    "lesion": cmd_lesion,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"pld {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
