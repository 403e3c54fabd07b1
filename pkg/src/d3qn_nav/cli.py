"""Command line: ``d3qn-nav {train,eval,compare,gradcheck,render}``.

Settings resolve as defaults < config file < ``D3QN_OUT_DIR`` < flags. Bad
flags exit with status 2 (argparse), runtime failures with status 1 and a
one-line message on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import neuro
from .config import dump_config, load_config
from .errors import D3QNError, UsageError
from .geom_sim import load_world_file
from .qagent import PRESETS, VARIANTS, network_layout
from .render import render_trajectory, write_svg
from .trainer import (
    RunConfig,
    compare_variants,
    evaluate,
    evaluate_agent,
    format_table,
    train,
)

log = logging.getLogger("d3qn_nav")

GRADCHECK_TOL = 1e-4
DENSE_ONLY_TOL = 1e-6


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _variants(text: str) -> list:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in VARIANTS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    return names


def _positive(text: str) -> int:
    n = int(text)
    if n <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def _non_negative(text: str) -> int:
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d3qn-nav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", type=Path, help="INI run config (see default.config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--preset", choices=PRESETS)
        sp.add_argument("--episodes", type=_positive, help="stage-1 episodes")
        sp.add_argument("--stage2-episodes", type=_non_negative)
        sp.add_argument("--no-corrupt", action="store_true", help="disable sensor corruption")

    sp = sub.add_parser("train", help="train one agent through the curriculum")
    run_flags(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--resume", type=Path, help="continue from a checkpoint written by train")

    sp = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--world", default="heldout")
    sp.add_argument("--episodes", type=_positive, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-corrupt", action="store_true")
    sp.add_argument("--out", type=Path, help="metrics JSON path (default: print only)")

    sp = sub.add_parser("compare", help="train several variants over several seeds")
    run_flags(sp)
    sp.add_argument("--variants", type=_variants, default=list(VARIANTS))
    sp.add_argument("--seeds", type=_positive, default=5, help="number of seeds (1..N)")
    sp.add_argument("--workers", type=_positive, help="parallel cells (default: D3QN_THREADS or 1)")
    sp.add_argument("--keep-runs", action="store_true", help="also write per-cell logs and checkpoints")

    sp = sub.add_parser("gradcheck", help="finite-difference check of the network engine")
    sp.add_argument("--presets", default=",".join(PRESETS))
    sp.add_argument("--variant", choices=VARIANTS, default="d3qn")
    sp.add_argument("--trials", type=_positive, default=100)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("render", help="draw a world and a trajectory as SVG")
    sp.add_argument("--world", default="simple")
    sp.add_argument("--out", type=Path, required=True, help="SVG path")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--poses", type=Path, help="JSON list of [x, y, theta]")
    src.add_argument("--checkpoint", type=Path, help="run one greedy episode with this agent")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-corrupt", action="store_true")
    return p


def _run_config(args) -> RunConfig:
    run: dict = {}
    env_out = os.environ.get("D3QN_OUT_DIR")
    if env_out:
        run["out_dir"] = env_out
    for flag, key in (("seed", "seed"), ("preset", "preset"), ("episodes", "stage1_episodes"),
                      ("stage2_episodes", "stage2_episodes")):
        val = getattr(args, flag, None)
        if val is not None:
            run[key] = val
    if getattr(args, "out", None) is not None:
        run["out_dir"] = str(args.out)
    if getattr(args, "no_corrupt", False):
        run["corrupt"] = False
    overrides = {"run": run}
    if getattr(args, "variant", None):
        overrides["agent"] = {"variant": args.variant}
    return load_config(args.config, overrides)


def _progress(stats) -> None:
    if stats.episode % 50 == 0:
        log.info("episode %d  steps %d  ma_return %.2f  eps %.3f",
                 stats.episode, stats.total_steps, stats.ma_return_100, stats.epsilon)


def cmd_train(args) -> int:
    if args.resume is not None:
        res = train(RunConfig(), out_dir=args.out, resume_from=args.resume, progress=_progress)
        out = res.out_dir
    else:
        cfg = _run_config(args)
        out = Path(cfg.out_dir)
        _atomic_write(out / "effective.config", dump_config(cfg))
        res = train(cfg, out, progress=_progress)
    ett = res.episodes_to_threshold
    print(f"episodes: {len(res.returns)}  final ma_return_100: {res.final_ma_return:.3f}  "
          f"episodes to threshold: {'not reached' if ett is None else ett}")
    print(f"log: {out / 'learning_curve.csv'}\ncheckpoint: {res.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    metrics = evaluate(args.checkpoint, args.world, args.episodes, args.seed, corrupt=not args.no_corrupt)
    text = json.dumps(metrics, indent=2)
    if args.out is not None:
        _atomic_write(args.out, text + "\n")
    print(f"world {args.world}: collision-free {metrics['collision_free_rate']:.1%}  "
          f"mean return {metrics['mean_return']:.3f}  mean steps {metrics['mean_steps']:.1f}")
    return 0


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out_dir)
    _atomic_write(out / "effective.config", dump_config(cfg))
    result = compare_variants(cfg, args.variants, n_seeds=args.seeds, out_dir=out,
                              workers=args.workers, write_runs=args.keep_runs)
    print(format_table(result["table"]))
    print(f"wrote {out / 'comparison.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    if any(p not in PRESETS for p in presets):
        raise UsageError(f"unknown preset in {presets}; choose from {PRESETS}")
    ok = True
    for preset in presets:
        trunk, heads = network_layout(preset, args.variant, 64)
        err = neuro.grad_check(trunk, args.trials, input_size=64, heads=heads, seed=args.seed)
        dense_only = all(s.kind == "dense" for s in trunk) and all(
            s.kind == "dense" for _, hs in heads for s in hs)
        tol = DENSE_ONLY_TOL if dense_only else GRADCHECK_TOL
        passed = err < tol
        ok &= passed
        print(f"{preset:<7} max rel err {err:.3e}  (tol {tol:.0e})  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_render(args) -> int:
    world = load_world_file(args.world)
    if args.poses is not None:
        try:
            poses = json.loads(args.poses.read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read pose log {args.poses}: {exc}") from exc
    else:
        from .checkpoint import load_checkpoint

        agent = load_checkpoint(args.checkpoint)
        rc = agent.metadata.get("run_config")
        cfg = RunConfig.from_dict(rc) if rc else RunConfig()
        metrics = evaluate_agent(agent, cfg, args.world, 1, args.seed,
                                 corrupt=not args.no_corrupt, record_poses=True)
        poses = metrics["poses"][0]
    write_svg(args.out, render_trajectory(world, poses, title=f"{world.name}"))
    print(f"wrote {args.out} ({len(poses)} poses)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (D3QNError, OSError) as exc:
        print(f"d3qn-nav {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
