"""Guided autoregressive decoding.

Every slot of a frame is restricted to its own vocabulary block before
top-k / temperature sampling, so an image slot can never emit an action id
and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, obs_tokenizer
from . import model as M
from .action_codec import ActionCodec, ActionTokens
from .language import (N_ACTION, DrivingSequence, Frame, MalformedStreamError, VocabLayout,
                       allowed_range, deserialize, serialize)


class DecodingError(RuntimeError):
    def __init__(self, message: str, chunk: int | None = None):
        super().__init__(message if chunk is None else f"chunk {chunk}: {message}")
        self.chunk = chunk


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int | None = None  # None keeps the whole allowed range
    greedy: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.greedy and not self.temperature > 0:
            raise ValueError("temperature must be > 0 unless greedy")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class RolloutConfig:
    window_generate: int = 16
    window_condition: int = 8
    total_frames: int = 64

    def __post_init__(self) -> None:
        if self.window_generate < 1 or self.window_condition < 1 or self.total_frames < 1:
            raise ValueError("rollout windows and total must be positive")


def masked_distribution(logits: np.ndarray, allowed: tuple[int, int], cfg: SamplerConfig) -> np.ndarray:
    """Full-vocabulary probabilities after masking, top-k and temperature."""
    lo, hi = allowed
    if not 0 <= lo < hi <= len(logits):
        raise DecodingError(f"empty or invalid allowed range [{lo}, {hi})")
    sub = np.asarray(logits[lo:hi], dtype=np.float64)
    sub = np.where(np.isfinite(sub), sub, -np.inf)
    if not np.any(np.isfinite(sub)):
        raise DecodingError(f"no finite logits in [{lo}, {hi})")
    probs = np.zeros(len(logits))
    if cfg.greedy:
        probs[lo + int(np.argmax(sub))] = 1.0
        return probs
    k = hi - lo if cfg.top_k is None else min(cfg.top_k, hi - lo)
    keep = np.argsort(-sub, kind="stable")[:k]
    z = sub[keep] / cfg.temperature
    z = z - z[np.isfinite(z)].max()
    p = np.exp(z)
    probs[lo + keep] = p / p.sum()
    return probs


def sample_token(logits: np.ndarray, allowed: tuple[int, int], cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Draw one id from ``[lo, hi)``; ties in greedy/top-k go to the lower id."""
    lo, hi = allowed
    if cfg.greedy:
        sub = np.asarray(logits[lo:hi], dtype=np.float64)
        sub = np.where(np.isfinite(sub), sub, -np.inf)
        if not np.any(np.isfinite(sub)):
            raise DecodingError(f"no finite logits in [{lo}, {hi})")
        return lo + int(np.argmax(sub))
    p = masked_distribution(logits, allowed, cfg)[lo:hi]
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    i = min(i, hi - lo - 1)
    while p[i] == 0.0:  # never land on a zero-probability id through rounding
        i -= 1
    return lo + i


class Session:
    """A decoding context over a KV cache, tracking frame positions."""

    def __init__(self, params, cfg: M.ModelConfig, layout: VocabLayout, tpf: int, action_positions: bool = True):
        if cfg.vocab != layout.total:
            raise ValueError(f"model vocab {cfg.vocab} != layout total {layout.total}")
        self.params, self.cfg, self.layout, self.tpf = params, cfg, layout, tpf
        self.action_positions = action_positions
        self.dec = M.KVDecoder(params, cfg)
        self.tokens: list[int] = []
        self.last_logits: np.ndarray | None = None

    def _pos(self, idx: np.ndarray) -> np.ndarray:
        frame, slot = idx // self.tpf, idx % self.tpf
        if not self.action_positions:
            frame = np.where(slot >= self.tpf - N_ACTION, 0, frame)
        return frame

    def feed(self, tokens) -> None:
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        if tokens.size == 0:
            return
        if len(self.tokens) + tokens.size > self.cfg.context:
            raise ValueError(f"context overflow: {len(self.tokens) + tokens.size} > {self.cfg.context}")
        idx = np.arange(len(self.tokens), len(self.tokens) + tokens.size)
        logits = self.dec.feed(tokens, self._pos(idx))
        self.last_logits = logits[-1]
        self.tokens.extend(int(t) for t in tokens)

    def emit(self, n: int, scfg: SamplerConfig, rng: np.random.Generator) -> list[int]:
        """Sample ``n`` tokens continuing the stream, each masked to its slot's range."""
        if self.last_logits is None:
            raise DecodingError("cannot decode from an empty context")
        out = []
        for _ in range(n):
            slot = len(self.tokens) % self.tpf
            tok = sample_token(self.last_logits, allowed_range(slot, self.tpf, self.layout), scfg, rng)
            out.append(tok)
            self.feed([tok])
        return out


def _frame_from_tokens(tokens, layout: VocabLayout, tpf: int, grid_shape) -> Frame:
    return deserialize(np.asarray(tokens), layout, tpf, grid_shape).frames[0]


def generate_frame(params, cfg: M.ModelConfig, context: np.ndarray, layout: VocabLayout, tpf: int,
                   scfg: SamplerConfig = SamplerConfig(), rng: np.random.Generator | None = None,
                   grid_shape: tuple[int, int] | None = None, action_positions: bool = True) -> Frame:
    """Decode the next complete frame after ``context`` (which must end on a frame boundary)."""
    context = np.asarray(context, dtype=np.int64).ravel()
    if context.size == 0 or context.size % tpf:
        raise ValueError(f"context of {context.size} tokens does not end on a frame boundary (tpf {tpf})")
    if context.size + tpf > cfg.context:
        raise ValueError(f"context overflow: {context.size + tpf} > {cfg.context}")
    rng = rng if rng is not None else np.random.default_rng(scfg.seed)
    s = Session(params, cfg, layout, tpf, action_positions)
    s.feed(context)
    return _frame_from_tokens(s.emit(tpf, scfg, rng), layout, tpf, grid_shape)


def long_rollout(params, cfg: M.ModelConfig, seed_frames: DrivingSequence, layout: VocabLayout,
                 rc: RolloutConfig = RolloutConfig(), scfg: SamplerConfig = SamplerConfig(),
                 action_positions: bool = True) -> DrivingSequence:
    """Generate ``rc.total_frames`` frames in chunks of ``window_generate``.

    Each chunk restarts from the last ``window_condition`` frames. If a chunk
    outgrows the model context, the window slides forward frame by frame.
    """
    if len(seed_frames) < rc.window_condition:
        raise ValueError(f"need >= {rc.window_condition} seed frames, got {len(seed_frames)}")
    grid_shape = seed_frames[0].grid.shape
    tpf = seed_frames[0].grid.size + N_ACTION
    cap = cfg.context // tpf
    if rc.window_condition >= cap:
        raise ValueError(f"window_condition {rc.window_condition} must be < context capacity {cap} frames")
    rng = np.random.default_rng(scfg.seed)
    frames = list(seed_frames.frames)
    generated: list[Frame] = []
    chunk = 0
    while len(generated) < rc.total_frames:
        n_gen = min(rc.window_generate, rc.total_frames - len(generated))
        window = frames[-rc.window_condition:]
        try:
            s = Session(params, cfg, layout, tpf, action_positions)
            s.feed(serialize(DrivingSequence(window), layout))
            for _ in range(n_gen):
                if len(s.tokens) + tpf > cfg.context:
                    window = window[-(cap - 1):]
                    s = Session(params, cfg, layout, tpf, action_positions)
                    s.feed(serialize(DrivingSequence(window), layout))
                fr = _frame_from_tokens(s.emit(tpf, scfg, rng), layout, tpf, grid_shape)
                window.append(fr)
                frames.append(fr)
                generated.append(fr)
        except (DecodingError, MalformedStreamError, ValueError) as exc:
            raise DecodingError(str(exc), chunk=chunk) from exc
        chunk += 1
    return DrivingSequence(generated)


@dataclass
class PlanOutput:
    actions: np.ndarray  # (horizon, 3) decoded relative actions
    bins: np.ndarray  # (horizon, 3) action bins
    frames: list[Frame]  # generated future frames (world-model output)
    trajectory: list[np.ndarray]


def plan_full(params, cfg: M.ModelConfig, history: DrivingSequence, horizon: int, codec: ActionCodec,
              layout: VocabLayout, greedy: bool = True, scfg: SamplerConfig | None = None,
              action_positions: bool = True) -> PlanOutput:
    """Roll the model forward ``horizon`` frames and integrate the predicted actions.

    The action slots of the last history frame are the first prediction: the
    history contributes its images and the actions between history frames.
    """
    if len(history) == 0:
        raise ValueError("planning needs at least one history frame")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    scfg = scfg or SamplerConfig(greedy=greedy)
    if greedy and not scfg.greedy:
        scfg = SamplerConfig(scfg.temperature, scfg.top_k, True, scfg.seed)
    tpf = history[0].grid.size + N_ACTION
    grid_shape = history[0].grid.shape
    need = (len(history) + horizon - 1) * tpf
    if need > cfg.context:
        raise ValueError(f"context overflow: planning needs {need} tokens, model has {cfg.context}")
    rng = np.random.default_rng(scfg.seed)
    s = Session(params, cfg, layout, tpf, action_positions)
    s.feed(serialize(history, layout)[:-N_ACTION])
    bins = []
    frames = []
    q = s.emit(N_ACTION, scfg, rng)
    bins.append([q[k] - layout.action_offset(k) for k in range(N_ACTION)])
    for _ in range(horizon - 1):
        fr = _frame_from_tokens(s.emit(tpf, scfg, rng), layout, tpf, grid_shape)
        frames.append(fr)
        bins.append(list(fr.action.as_tuple()))
    bins = np.array(bins, dtype=np.int64)
    actions = codec.decode_array(bins)
    traj = geometry.integrate([geometry.RelativeAction.from_array(a) for a in actions])
    return PlanOutput(actions, bins, frames, traj)


def plan(params, cfg: M.ModelConfig, history: DrivingSequence, horizon: int, codec: ActionCodec,
         layout: VocabLayout, greedy: bool = True, scfg: SamplerConfig | None = None,
         action_positions: bool = True) -> list[np.ndarray]:
    return plan_full(params, cfg, history, horizon, codec, layout, greedy, scfg, action_positions).trajectory


class ModelPlanner:
    """Evaluator-facing planner: tokenizes the request history and plans with the model.

    Predicted actions are cached per scenario so copy ablations reuse one decode.
    """

    def __init__(self, params, cfg: M.ModelConfig, codebook, codec: ActionCodec, greedy: bool = True,
                 scfg: SamplerConfig | None = None, action_positions: bool = True):
        self.params, self.cfg, self.codebook, self.codec = params, cfg, codebook, codec
        self.layout = VocabLayout(codebook.D, codec.M)
        self.greedy = greedy
        self.scfg = scfg or SamplerConfig(greedy=greedy)
        self.action_positions = action_positions
        self._cache: dict[int, PlanOutput] = {}

    def history(self, req) -> DrivingSequence:
        grids = obs_tokenizer.encode_batch(np.asarray(req.images, dtype=np.float32) / 255.0, self.codebook)
        acts = np.zeros((len(grids), 3))
        acts[:len(req.actions)] = req.actions
        bins = self.codec.encode_array(acts)
        return DrivingSequence([Frame(g, ActionTokens(*map(int, q))) for g, q in zip(grids, bins)])

    def predict(self, req) -> PlanOutput:
        key = req.scenario.seed
        if key not in self._cache:
            # private stream per scenario: evaluation order cannot change any single plan
            seed = int(np.random.SeedSequence([self.scfg.seed, key]).generate_state(1)[0])
            scfg = SamplerConfig(self.scfg.temperature, self.scfg.top_k, self.greedy, seed)
            self._cache[key] = plan_full(self.params, self.cfg, self.history(req), req.horizon, self.codec,
                                         self.layout, self.greedy, scfg, self.action_positions)
        return self._cache[key]

    def __call__(self, req) -> list[np.ndarray]:
        return self.predict(req).trajectory
