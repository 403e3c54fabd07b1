"""Depth corruption and observation assembly.

Raw raycast scans are degraded (blur, Gaussian noise, dropout) to mimic the
smooth but unreliable depth produced by a monocular depth predictor, then
normalized to [0, 1] and optionally frame-stacked.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class CorruptionConfig:
    gauss_sigma: float = 0.05  # fraction of max_range
    blur_radius: int = 2
    dropout_prob: float = 0.02

    def __post_init__(self) -> None:
        if self.gauss_sigma < 0:
            raise ConfigError("gauss_sigma must be >= 0")
        if self.blur_radius < 0 or int(self.blur_radius) != self.blur_radius:
            raise ConfigError("blur_radius must be a non-negative integer")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError("dropout_prob must lie in [0, 1)")

    @classmethod
    def disabled(cls) -> "CorruptionConfig":
        return cls(0.0, 0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self.gauss_sigma == 0 and self.blur_radius == 0 and self.dropout_prob == 0


def triangular_kernel(radius: int) -> np.ndarray:
    """Normalized triangular weights of half-width ``radius``."""
    w = (radius + 1 - np.abs(np.arange(-radius, radius + 1))).astype(np.float64)
    return w / w.sum()


def blur(scan: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return scan.copy()
    padded = np.pad(scan, radius, mode="edge")
    return np.convolve(padded, triangular_kernel(radius), mode="valid")


def corrupt_scan(
    scan: np.ndarray,
    cfg: CorruptionConfig,
    rng: np.random.Generator,
    max_range: float,
) -> np.ndarray:
    """Blur, add noise, drop rays to ``max_range``, then clamp to ``[0, max_range]``.

    Draws from ``rng`` only for the stages that are enabled, so an all-zero
    config is the identity and consumes no randomness.
    """
    out = blur(np.asarray(scan, dtype=np.float64), int(cfg.blur_radius))
    if cfg.gauss_sigma > 0:
        out = out + rng.normal(0.0, cfg.gauss_sigma * max_range, size=out.shape)
    if cfg.dropout_prob > 0:
        out = np.where(rng.random(out.shape) < cfg.dropout_prob, max_range, out)
    return np.clip(out, 0.0, max_range)


def make_observation(history: Sequence[np.ndarray], max_range: float, stack_k: int = 1) -> np.ndarray:
    """Concatenate the last ``stack_k`` scans (newest last), scaled into [0, 1].

    When fewer than ``stack_k`` scans exist the oldest one is repeated.
    """
    if len(history) == 0:
        raise UsageError("observation history is empty")
    frames = list(history)[-stack_k:]
    frames = [frames[0]] * (stack_k - len(frames)) + frames
    obs = np.concatenate(frames) / max_range
    return np.clip(obs, 0.0, 1.0).astype(np.float32)


class DepthSensor:
    """Stateful wrapper: corrupts each raw scan and keeps the frame history."""

    def __init__(
        self,
        max_range: float,
        cfg: Optional[CorruptionConfig] = None,
        stack_k: int = 1,
        seed: Optional[int] = None,
        enabled: bool = True,
    ) -> None:
        if stack_k < 1:
            raise ConfigError("stack_k must be >= 1")
        self.max_range = max_range
        self.cfg = cfg if cfg is not None else CorruptionConfig()
        self.stack_k = stack_k
        self.enabled = enabled
        self.rng = np.random.default_rng(seed)
        self.history: deque = deque(maxlen=stack_k)

    def reset(self, scan: np.ndarray) -> np.ndarray:
        self.history.clear()
        return self.observe(scan)

    def observe(self, scan: np.ndarray) -> np.ndarray:
        if self.enabled:
            scan = corrupt_scan(scan, self.cfg, self.rng, self.max_range)
        self.history.append(scan)
        return make_observation(self.history, self.max_range, self.stack_k)
