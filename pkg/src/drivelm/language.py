"""Unified vocabulary and frame-interleaved serialization.

A frame is its image token grid (row-major) followed by three action tokens
(x, y, theta). Global ids place image tokens in ``[0, D)`` and the action
components in three consecutive blocks of ``M`` ids each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .action_codec import ActionTokens

N_ACTION = 3


class MalformedStreamError(ValueError):
    def __init__(self, message: str, frame: int | None = None, slot: int | None = None):
        super().__init__(message)
        self.frame = frame
        self.slot = slot


@dataclass(frozen=True)
class VocabLayout:
    D: int
    M: int

    def __post_init__(self) -> None:
        if self.D < 1 or self.M < 2:
            raise ValueError(f"need D >= 1 and M >= 2, got D={self.D} M={self.M}")

    @property
    def total(self) -> int:
        return self.D + N_ACTION * self.M

    def action_offset(self, k: int) -> int:
        return self.D + k * self.M

    def ranges(self) -> list[tuple[int, int]]:
        return [(0, self.D)] + [(self.action_offset(k), self.action_offset(k + 1)) for k in range(N_ACTION)]


def layout(D: int, M: int) -> VocabLayout:
    return VocabLayout(D, M)


@dataclass
class Frame:
    grid: np.ndarray  # (gh, gw) image token indices
    action: ActionTokens


@dataclass
class DrivingSequence:
    frames: list[Frame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return DrivingSequence(self.frames[i])
        return self.frames[i]

    def action_bins(self) -> np.ndarray:
        return np.array([f.action.as_tuple() for f in self.frames], dtype=np.int64).reshape(-1, 3)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DrivingSequence) or len(self) != len(other):
            return False
        return all(np.array_equal(a.grid, b.grid) and a.action == b.action
                   for a, b in zip(self.frames, other.frames))


def tokens_per_frame(n_image_tokens: int) -> int:
    return n_image_tokens + N_ACTION


def serialize(seq: DrivingSequence, L: VocabLayout) -> np.ndarray:
    """Flatten a sequence into global token ids (int64)."""
    if not seq.frames:
        return np.zeros(0, dtype=np.int64)
    n_img = seq.frames[0].grid.size
    out = np.empty(len(seq) * (n_img + N_ACTION), dtype=np.int64)
    pos = 0
    for t, fr in enumerate(seq.frames):
        g = np.asarray(fr.grid).ravel()
        if g.size != n_img:
            raise MalformedStreamError(f"frame {t} has {g.size} image tokens, expected {n_img}", frame=t)
        if g.size and (g.min() < 0 or g.max() >= L.D):
            raise MalformedStreamError(f"frame {t}: image token outside [0, {L.D})", frame=t)
        out[pos:pos + n_img] = g
        pos += n_img
        for k, q in enumerate(fr.action.as_tuple()):
            if not 0 <= q < L.M:
                raise MalformedStreamError(f"frame {t}: action bin {q} outside [0, {L.M})",
                                           frame=t, slot=n_img + k)
            out[pos] = q + L.action_offset(k)
            pos += 1
    return out


def deserialize(stream: np.ndarray, L: VocabLayout, tpf: int, grid_shape: tuple[int, int] | None = None) -> DrivingSequence:
    stream = np.asarray(stream, dtype=np.int64).ravel()
    if tpf <= N_ACTION:
        raise ValueError(f"tokens_per_frame must exceed {N_ACTION}")
    if stream.size % tpf:
        raise MalformedStreamError(f"stream length {stream.size} not a multiple of {tpf}")
    n_img = tpf - N_ACTION
    if grid_shape is None:
        side = int(round(n_img ** 0.5))
        grid_shape = (side, side) if side * side == n_img else (1, n_img)
    frames = []
    for t in range(stream.size // tpf):
        chunk = stream[t * tpf:(t + 1) * tpf]
        for slot in range(tpf):
            lo, hi = allowed_range(slot, tpf, L)
            if not lo <= chunk[slot] < hi:
                raise MalformedStreamError(
                    f"frame {t} slot {slot}: id {chunk[slot]} outside [{lo}, {hi})", frame=t, slot=slot)
        grid = chunk[:n_img].reshape(grid_shape).copy()
        q = [int(chunk[n_img + k] - L.action_offset(k)) for k in range(N_ACTION)]
        frames.append(Frame(grid, ActionTokens(*q)))
    return DrivingSequence(frames)


def positions(T: int, tpf: int, action_positions: bool = True) -> np.ndarray:
    """Per-token rotary position: the frame index, shared by every token of a frame.

    With ``action_positions=False`` the action slots get position 0 (the
    no-action-position-embedding ablation).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    pos = np.repeat(np.arange(T, dtype=np.int64), tpf)
    if not action_positions:
        pos.reshape(T, tpf)[:, tpf - N_ACTION:] = 0
    return pos


def allowed_range(slot: int, tpf: int, L: VocabLayout) -> tuple[int, int]:
    if not 0 <= slot < tpf:
        raise ValueError(f"slot {slot} outside [0, {tpf})")
    k = slot - (tpf - N_ACTION)
    if k < 0:
        return (0, L.D)
    return (L.action_offset(k), L.action_offset(k + 1))


def slot_ranges(tpf: int, L: VocabLayout) -> np.ndarray:
    """(tpf, 2) array of allowed [lo, hi) per slot."""
    return np.array([allowed_range(s, tpf, L) for s in range(tpf)], dtype=np.int64)
