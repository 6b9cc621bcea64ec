"""Per-component uniform quantization of relative actions.

Each component is clamped to percentile bounds fitted on the training split
and mapped to one of ``M`` bins with ``floor((v - lo) / (hi - lo) * (M - 1))``.
Decoding returns the bin centre, with the top bin pinned to ``hi``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import RelativeAction

CODEC_FORMAT = "drivelm-codec/1"
COMPONENTS = ("x", "y", "theta")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class ComponentBounds:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise CodecError("bounds must be finite")
        if self.lo > self.hi:
            raise CodecError(f"lo {self.lo} > hi {self.hi}")


@dataclass(frozen=True)
class ActionTokens:
    qx: int
    qy: int
    qtheta: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.qx, self.qy, self.qtheta)


def fit_bounds(samples: Sequence[float], lo_pct: float = 1.0, hi_pct: float = 99.0) -> ComponentBounds:
    """Nearest-rank percentiles of ``samples``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise CodecError("cannot fit bounds on empty samples")
    if not np.all(np.isfinite(x)):
        raise CodecError("samples must be finite")

    def rank(p: float) -> float:
        i = math.ceil(p / 100.0 * n) - 1
        return float(x[min(max(i, 0), n - 1)])

    return ComponentBounds(rank(lo_pct), rank(hi_pct))


def encode_component(v: float, b: ComponentBounds, M: int) -> int:
    if M < 2:
        raise CodecError("M must be >= 2")
    if b.hi == b.lo:
        return 0
    clamped = min(max(v, b.lo), b.hi)
    q = math.floor((clamped - b.lo) / (b.hi - b.lo) * (M - 1))
    return min(max(q, 0), M - 1)


def decode_component(q: int, b: ComponentBounds, M: int) -> float:
    if not 0 <= q < M:
        raise CodecError(f"bin {q} outside [0, {M})")
    if b.hi == b.lo:
        return b.lo
    u = min((q + 0.5) / (M - 1), 1.0)
    return b.lo + u * (b.hi - b.lo)


def flip_action(a: RelativeAction) -> RelativeAction:
    """Mirror an action across the longitudinal axis."""
    return RelativeAction(a.dx, -a.dy, -a.dtheta)


@dataclass(frozen=True)
class ActionCodec:
    bounds_x: ComponentBounds
    bounds_y: ComponentBounds
    bounds_theta: ComponentBounds
    M: int
    lo_pct: float = 1.0
    hi_pct: float = 99.0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise CodecError("M must be >= 2")

    @property
    def bounds(self) -> tuple[ComponentBounds, ComponentBounds, ComponentBounds]:
        return (self.bounds_x, self.bounds_y, self.bounds_theta)

    @classmethod
    def fit(cls, actions: np.ndarray, M: int, lo_pct: float = 1.0, hi_pct: float = 99.0) -> "ActionCodec":
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
        b = [fit_bounds(actions[:, i], lo_pct, hi_pct) for i in range(3)]
        return cls(b[0], b[1], b[2], M, lo_pct, hi_pct)

    def encode(self, a: RelativeAction) -> ActionTokens:
        return ActionTokens(*(encode_component(v, b, self.M)
                              for v, b in zip((a.dx, a.dy, a.dtheta), self.bounds)))

    def decode(self, t: ActionTokens) -> RelativeAction:
        return RelativeAction(*(decode_component(q, b, self.M)
                                for q, b in zip(t.as_tuple(), self.bounds)))

    def encode_array(self, actions: np.ndarray) -> np.ndarray:
        """Vectorised encode of an (N, 3) array; same rule as :func:`encode_component`."""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(actions.shape, dtype=np.int64)
        for i, b in enumerate(self.bounds):
            if b.hi == b.lo:
                continue
            u = (np.clip(actions[:, i], b.lo, b.hi) - b.lo) / (b.hi - b.lo)
            out[:, i] = np.clip(np.floor(u * (self.M - 1)), 0, self.M - 1)
        return out

    def decode_array(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 3)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.M):
            raise CodecError(f"bins outside [0, {self.M})")
        out = np.empty(tokens.shape, dtype=np.float64)
        for i, b in enumerate(self.bounds):
            if b.hi == b.lo:
                out[:, i] = b.lo
                continue
            u = np.minimum((tokens[:, i] + 0.5) / (self.M - 1), 1.0)
            out[:, i] = b.lo + u * (b.hi - b.lo)
        return out

    def half_bin(self) -> np.ndarray:
        return np.array([(b.hi - b.lo) / (2 * (self.M - 1)) for b in self.bounds])

    def to_dict(self) -> dict:
        return {
            "format": CODEC_FORMAT,
            "M": self.M,
            "percentiles": {"lo": self.lo_pct, "hi": self.hi_pct},
            "bounds": {name: {"lo": b.lo, "hi": b.hi} for name, b in zip(COMPONENTS, self.bounds)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionCodec":
        if d.get("format") != CODEC_FORMAT:
            raise CodecError(f"unsupported codec format {d.get('format')!r}")
        b = [ComponentBounds(float(d["bounds"][n]["lo"]), float(d["bounds"][n]["hi"])) for n in COMPONENTS]
        p = d.get("percentiles", {})
        return cls(b[0], b[1], b[2], int(d["M"]), float(p.get("lo", 1.0)), float(p.get("hi", 99.0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ActionCodec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def encode_action(a: RelativeAction, c: ActionCodec) -> ActionTokens:
    return c.encode(a)


def decode_action(t: ActionTokens, c: ActionCodec) -> RelativeAction:
    return c.decode(t)
