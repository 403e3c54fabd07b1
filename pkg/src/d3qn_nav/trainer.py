"""Episode loop, two-stage curriculum, evaluation and variant comparison."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import statistics
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .depth_sensor import CorruptionConfig, DepthSensor
from .errors import ConfigError, TrainingError, UsageError
from .geom_sim import MAX_STEPS, ObstacleEnv, Terminal, load_world_file
from .qagent import VARIANTS, AgentConfig, QAgent, Transition

log = logging.getLogger(__name__)

# Wall-clock time is kept out of the learning curve so that seeded runs give
# byte-identical logs; it goes to a separate timing file instead.
CSV_COLUMNS = (
    "episode", "steps", "return", "ma_return_100", "loss_mean",
    "epsilon", "terminal_cause", "total_steps",
)
TIMING_COLUMNS = ("episode", "wall_s")
MA_WINDOW = 100


@dataclass
class EpisodeStats:
    episode: int
    steps: int
    ret: float
    terminal_cause: str
    loss_mean: float = math.nan
    epsilon: float = 0.0
    wall_s: float = 0.0
    total_steps: int = 0
    ma_return_100: float = math.nan
    poses: Optional[list] = None


@dataclass
class RunConfig:
    stage1_world: str = "simple"
    stage2_world: str = "complex"
    stage1_episodes: int = 1000
    stage2_episodes: int = 0
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    corrupt: bool = True
    stack_k: int = 1
    n_rays: int = 64
    fov_deg: float = 90.0
    max_range: float = 5.0
    robot_radius: float = 0.2
    agent: AgentConfig = field(default_factory=AgentConfig)
    preset: str = "dense"
    train_every: int = 1
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 200
    save_replay: bool = True
    threshold: float = 15.0

    def __post_init__(self) -> None:
        if self.stage1_episodes <= 0 or self.stage2_episodes < 0:
            raise ConfigError("stage1_episodes must be > 0 and stage2_episodes >= 0")
        if self.train_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("train_every and checkpoint_every must be >= 1")

    @property
    def input_size(self) -> int:
        return self.n_rays * self.stack_k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["corruption"] = CorruptionConfig(**d.get("corruption", {}))
        d["agent"] = AgentConfig(**d.get("agent", {}))
        return cls(**d)

    def seed_streams(self) -> dict:
        """Independent integer seeds for each RNG consumer, derived from ``seed``."""
        env_ss, sensor_ss, agent_ss = np.random.SeedSequence(self.seed).spawn(3)
        return {
            "env": int(env_ss.generate_state(1)[0]),
            "sensor": int(sensor_ss.generate_state(1)[0]),
            "agent": int(agent_ss.generate_state(1)[0]),
        }


def make_env(cfg: RunConfig, world: str, seed: Optional[int]) -> ObstacleEnv:
    return ObstacleEnv(
        load_world_file(world),
        robot_radius=cfg.robot_radius,
        n_rays=cfg.n_rays,
        fov=math.radians(cfg.fov_deg),
        max_range=cfg.max_range,
        seed=seed,
    )


def make_sensor(cfg: RunConfig, seed: Optional[int], enabled: Optional[bool] = None) -> DepthSensor:
    return DepthSensor(
        cfg.max_range, cfg.corruption, cfg.stack_k, seed=seed,
        enabled=cfg.corrupt if enabled is None else enabled,
    )


def make_agent(cfg: RunConfig, variant: Optional[str] = None) -> QAgent:
    agent_cfg = cfg.agent if variant is None else replace(cfg.agent, variant=variant)
    return QAgent(agent_cfg, cfg.input_size, cfg.preset, seed=cfg.seed_streams()["agent"], stack_k=cfg.stack_k)


# ----------------------------------------------------------------------
# Episodes
# ----------------------------------------------------------------------


def run_episode(
    env: ObstacleEnv,
    agent: QAgent,
    sensor: DepthSensor,
    mode: str = "train",
    train_every: int = 1,
    episode: int = 0,
    reset_seed: Optional[int] = None,
    record_poses: bool = False,
    policy: Optional[Callable] = None,
) -> EpisodeStats:
    """Play one episode: observe, act, step until collision or the step limit.

    In ``train`` mode transitions are stored, the learner is stepped every
    ``train_every`` environment steps once the buffer is warm, and the target
    net is synced on schedule. ``eval`` mode is greedy and never learns.
    ``policy`` (obs -> ActionPair) overrides the agent's action choice.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    t0 = time.perf_counter()
    obs = sensor.reset(env.reset(seed=reset_seed))
    ret, losses = 0.0, []
    try:
        while True:
            if policy is not None:
                action = policy(obs)
            else:
                action = agent.act(obs, None if training else 0.0)
            res = env.step(action)
            next_obs = sensor.observe(res.observation)
            ret += res.reward
            if training:
                # Step-limit endings are truncations, so only collisions cut the bootstrap.
                agent.observe(Transition(obs, action, res.reward, next_obs,
                                         res.terminal is Terminal.COLLISION))
                agent.global_step += 1
                if agent.ready() and agent.global_step % train_every == 0:
                    losses.append(agent.train_step(agent.sample())["loss"])
                agent.maybe_sync()
            obs = next_obs
            if res.done:
                break
    except TrainingError as exc:
        raise TrainingError(f"episode {episode}, step {env.step_index}: {exc}") from exc
    return EpisodeStats(
        episode=episode,
        steps=env.step_index,
        ret=ret,
        terminal_cause=env.terminal.value,
        loss_mean=float(np.mean(losses)) if losses else math.nan,
        epsilon=agent.epsilon if training else 0.0,
        wall_s=time.perf_counter() - t0,
        total_steps=agent.global_step,
        poses=list(env.pose_log) if record_poses else None,
    )


def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def csv_row(s: EpisodeStats) -> list:
    return [s.episode, s.steps, _fmt(s.ret), _fmt(s.ma_return_100), _fmt(s.loss_mean),
            _fmt(s.epsilon), s.terminal_cause, s.total_steps]


def episodes_to_threshold(ma_returns: Sequence[float], threshold: float) -> Optional[int]:
    """1-based episode index where the moving average first reaches ``threshold``."""
    for i, v in enumerate(ma_returns):
        if v >= threshold:
            return i + 1
    return None


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    returns: list
    ma_returns: list
    steps: list
    final_checkpoint: Path
    stage_digests: dict
    episodes_to_threshold: Optional[int]

    @property
    def final_ma_return(self) -> float:
        return self.ma_returns[-1] if self.ma_returns else math.nan


class Trainer:
    """Runs the simple -> complex curriculum and owns logs and checkpoints."""

    def __init__(self, config: RunConfig, out_dir: Optional[Path] = None, variant: Optional[str] = None,
                 write_files: bool = True) -> None:
        self.config = config
        self.out_dir = Path(out_dir if out_dir is not None else config.out_dir)
        self.write_files = write_files
        seeds = config.seed_streams()
        self.agent = make_agent(config, variant)
        self.envs = {
            1: make_env(config, config.stage1_world, seeds["env"]),
        }
        if config.stage2_episodes:
            self.envs[2] = make_env(config, config.stage2_world, seeds["env"] + 1)
        self.sensor = make_sensor(config, seeds["sensor"])
        self.episode = 0
        self.returns: list[float] = []
        self.ma_returns: list[float] = []
        self.steps: list[int] = []
        self.best_ma = -math.inf
        self.stage_digests: dict = {}
        self._csv_rows: list[list] = []
        self._timing_rows: list[list] = []

    @property
    def total_episodes(self) -> int:
        return self.config.stage1_episodes + self.config.stage2_episodes

    def stage_of(self, episode: int) -> int:
        return 1 if episode <= self.config.stage1_episodes else 2

    # -- persistence ----------------------------------------------------

    @property
    def csv_path(self) -> Path:
        return self.out_dir / "learning_curve.csv"

    @property
    def timing_path(self) -> Path:
        return self.out_dir / "timing.csv"

    def _metadata(self) -> dict:
        return {
            "episode": self.episode,
            "returns": self.returns,
            "steps": self.steps,
            "best_ma": self.best_ma if math.isfinite(self.best_ma) else None,
            "stage_digests": self.stage_digests,
            "run_config": self.config.to_dict(),
            "env_rng": {k: e.rng.bit_generator.state for k, e in self.envs.items()},
            "sensor_rng": self.sensor.rng.bit_generator.state,
            "csv_rows": self._csv_rows,
            "timing_rows": self._timing_rows,
        }

    def save(self, name: str, save_replay: Optional[bool] = None) -> Path:
        path = self.out_dir / "checkpoints" / f"{name}.ckpt"
        return save_checkpoint(
            self.agent, path, self._metadata(),
            save_replay=self.config.save_replay if save_replay is None else save_replay,
        )

    @classmethod
    def resume(cls, checkpoint: Path, out_dir: Optional[Path] = None) -> "Trainer":
        """Rebuild a trainer mid-run from a checkpoint written by :meth:`save`."""
        agent = load_checkpoint(checkpoint)
        meta = agent.metadata
        config = RunConfig.from_dict(meta["run_config"])
        trainer = cls(config, out_dir=out_dir)
        trainer.agent = agent
        trainer.episode = int(meta["episode"])
        trainer.returns = [float(r) for r in meta["returns"]]
        trainer.steps = [int(s) for s in meta["steps"]]
        trainer.ma_returns = [
            float(np.mean(trainer.returns[max(0, i + 1 - MA_WINDOW) : i + 1]))
            for i in range(len(trainer.returns))
        ]
        trainer.best_ma = meta["best_ma"] if meta["best_ma"] is not None else -math.inf
        trainer.stage_digests = dict(meta["stage_digests"])
        for k, state in meta["env_rng"].items():
            trainer.envs[int(k)].rng.bit_generator.state = state
        trainer.sensor.rng.bit_generator.state = meta["sensor_rng"]
        trainer._csv_rows = [list(r) for r in meta["csv_rows"]]
        trainer._timing_rows = [list(r) for r in meta.get("timing_rows", [])]
        return trainer

    def _logs(self):
        return ((self.csv_path, CSV_COLUMNS, self._csv_rows),
                (self.timing_path, TIMING_COLUMNS, self._timing_rows))

    def _write_csv(self, final: bool) -> None:
        if not self.write_files:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for path, header, rows in self._logs():
            part = path.with_name(path.name + ".part")
            with open(part, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            if final:
                os.replace(part, path)

    def _append_csv(self, row: list, wall_s: float) -> None:
        self._csv_rows.append(row)
        self._timing_rows.append([row[0], f"{wall_s:.4f}"])
        if not self.write_files:
            return
        for path, _, rows in self._logs():
            part = path.with_name(path.name + ".part")
            if not part.exists():
                self._write_csv(final=False)
                return
            with open(part, "a", newline="") as fh:
                csv.writer(fh).writerow(rows[-1])

    # -- loop -----------------------------------------------------------

    def train(self, stop_after: Optional[int] = None, progress: Optional[Callable] = None) -> TrainResult:
        """Run (or continue) the curriculum.

        ``stop_after`` halts after that many total episodes without finalizing
        outputs, which is how interrupted runs are simulated in tests.
        """
        cfg = self.config
        if self.write_files:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._write_csv(final=False)
        last_good: Optional[Path] = None
        end = self.total_episodes if stop_after is None else min(stop_after, self.total_episodes)
        while self.episode < end:
            ep = self.episode + 1
            stage = self.stage_of(ep)
            key = f"stage{stage}_start"
            if key not in self.stage_digests:
                self.stage_digests[key] = self.agent.online.digest()
            try:
                stats = run_episode(self.envs[stage], self.agent, self.sensor, "train",
                                    cfg.train_every, episode=ep)
            except TrainingError:
                if last_good is not None:
                    log.error("training diverged; last good checkpoint kept at %s", last_good)
                raise
            self.episode = ep
            self.returns.append(stats.ret)
            self.steps.append(stats.steps)
            stats.ma_return_100 = float(np.mean(self.returns[-MA_WINDOW:]))
            self.ma_returns.append(stats.ma_return_100)
            self._append_csv(csv_row(stats), stats.wall_s)
            if progress is not None:
                progress(stats)
            if stage == 1 and ep == cfg.stage1_episodes:
                self.stage_digests["stage1_end"] = self.agent.online.digest()
            if self.write_files and ep % cfg.checkpoint_every == 0:
                last_good = self.save("latest")
                if stats.ma_return_100 > self.best_ma:
                    self.best_ma = stats.ma_return_100
                    self.save("best", save_replay=False)
        final = self.out_dir / "checkpoints" / "final.ckpt"
        if stop_after is None or self.episode >= self.total_episodes:
            if self.write_files:
                final = self.save("final")
                self._write_csv(final=True)
        return TrainResult(
            self.out_dir, list(self.returns), list(self.ma_returns), list(self.steps), final,
            dict(self.stage_digests), episodes_to_threshold(self.ma_returns, cfg.threshold),
        )


def train(config: RunConfig, out_dir: Optional[Path] = None, resume_from: Optional[Path] = None,
          progress: Optional[Callable] = None) -> TrainResult:
    if resume_from is not None:
        trainer = Trainer.resume(Path(resume_from), out_dir=out_dir)
    else:
        trainer = Trainer(config, out_dir=out_dir)
    return trainer.train(progress=progress)


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


def evaluate_agent(
    agent: QAgent,
    config: RunConfig,
    world: str,
    n_episodes: int,
    seed: int = 0,
    corrupt: bool = True,
    record_poses: bool = False,
) -> dict:
    """Greedy episodes on ``world``; parameters are never touched."""
    if n_episodes <= 0:
        raise UsageError("n_episodes must be positive")
    version = agent.online.version
    env = make_env(config, world, None)
    sensor = make_sensor(config, seed + 7919, enabled=corrupt)
    episodes = []
    for i in range(n_episodes):
        s = run_episode(env, agent, sensor, "eval", episode=i + 1, reset_seed=seed + i,
                        record_poses=record_poses)
        episodes.append(s)
    if agent.online.version != version:
        raise UsageError("evaluation modified the network parameters")
    per = [
        {"episode": s.episode, "return": s.ret, "steps": s.steps, "terminal_cause": s.terminal_cause}
        for s in episodes
    ]
    return {
        "world": str(world),
        "n_episodes": n_episodes,
        "mean_return": float(np.mean([s.ret for s in episodes])),
        "collision_free_rate": float(np.mean([s.terminal_cause != Terminal.COLLISION.value for s in episodes])),
        "mean_steps": float(np.mean([s.steps for s in episodes])),
        "episodes": per,
        "poses": [s.poses for s in episodes] if record_poses else None,
    }


def evaluate(checkpoint: Path, world: str, n_episodes: int, seed: int = 0, corrupt: bool = True,
             config: Optional[RunConfig] = None) -> dict:
    if n_episodes <= 0:
        raise UsageError("n_episodes must be positive")
    agent = load_checkpoint(checkpoint)
    if config is None:
        rc = agent.metadata.get("run_config")
        config = RunConfig.from_dict(rc) if rc else RunConfig()
    if config.input_size != agent.input_size:
        raise UsageError("run config observation size does not match the checkpoint")
    return evaluate_agent(agent, config, world, n_episodes, seed, corrupt)


# ----------------------------------------------------------------------
# Variant comparison
# ----------------------------------------------------------------------


def _train_cell(args) -> dict:
    config, variant, seed, out_dir, write_files = args
    cfg = replace(config, seed=seed, agent=replace(config.agent, variant=variant))
    t0 = time.perf_counter()
    trainer = Trainer(cfg, out_dir=Path(out_dir) / f"{variant}_seed{seed}", write_files=write_files)
    res = trainer.train()
    return {
        "variant": variant,
        "seed": seed,
        "episodes_to_threshold": res.episodes_to_threshold,
        "final_ma_return": res.final_ma_return,
        "returns": res.returns,
        "ma_returns": res.ma_returns,
        "steps": res.steps,
        "wall_s": time.perf_counter() - t0,
    }


def _median_ett(values: list) -> Optional[float]:
    """Median episodes-to-threshold; runs that never got there count as infinite."""
    vals = sorted(math.inf if v is None else v for v in values)
    med = statistics.median(vals)
    return None if math.isinf(med) else float(med)


def compare_variants(
    config: RunConfig,
    variants: Sequence[str] = VARIANTS,
    n_seeds: int = 5,
    out_dir: Optional[Path] = None,
    seeds: Optional[Sequence[int]] = None,
    workers: Optional[int] = None,
    write_runs: bool = False,
) -> dict:
    """Train every (variant, seed) cell and summarize learning speed.

    Env and sensor streams depend only on the seed, so all variants face the
    same spawn and corruption sequences per seed.
    """
    variants = list(variants)
    if len(variants) < 2:
        raise UsageError("compare needs at least two variants")
    if any(v not in VARIANTS for v in variants):
        raise UsageError(f"unknown variant in {variants}")
    seeds = list(seeds) if seeds is not None else list(range(1, n_seeds + 1))
    if len(seeds) < 3:
        raise UsageError("compare needs at least three seeds")
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    workers = workers or int(os.environ.get("D3QN_THREADS", "1"))
    cells = [(config, v, s, str(out_dir), write_runs) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_cell, cells))
    else:
        results = [_train_cell(c) for c in cells]

    table = []
    for v in variants:
        rows = [r for r in results if r["variant"] == v]
        table.append({
            "variant": v,
            "median_episodes_to_threshold": _median_ett([r["episodes_to_threshold"] for r in rows]),
            "episodes_to_threshold": [r["episodes_to_threshold"] for r in rows],
            "median_final_ma_return": float(statistics.median(r["final_ma_return"] for r in rows)),
            "final_ma_return": [r["final_ma_return"] for r in rows],
        })
    summary = {"threshold": config.threshold, "seeds": seeds, "table": table}
    write_comparison(out_dir, results, summary)
    return {"table": table, "cells": results, "summary": summary}


def write_comparison(out_dir: Path, results: list, summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(("variant", "seed", "episode", "steps", "return", "ma_return_100", "total_steps"))
    for r in results:
        total = 0
        for i, (ret, ma, st) in enumerate(zip(r["returns"], r["ma_returns"], r["steps"])):
            total += st
            w.writerow((r["variant"], r["seed"], i + 1, st, _fmt(ret), _fmt(ma), total))
    _atomic_text(out_dir / "comparison.csv", buf.getvalue())
    _atomic_text(out_dir / "comparison.json", json.dumps(summary, indent=2))


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def format_table(table: list) -> str:
    lines = [f"{'variant':<8} {'median ep->thr':>15} {'median final MA':>16}"]
    for row in table:
        ett = row["median_episodes_to_threshold"]
        lines.append(
            f"{row['variant']:<8} {('not reached' if ett is None else f'{ett:.0f}'):>15} "
            f"{row['median_final_ma_return']:>16.2f}"
        )
    return "\n".join(lines)
