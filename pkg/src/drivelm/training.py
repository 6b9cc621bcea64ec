"""Next-token training loop over a tokenized corpus."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .dataset import Corpus
from .language import positions

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    seed: int = 0
    hflip: bool = True
    action_positions: bool = True
    eval_every: int = 100
    target_loss: float | None = None
    log_every: int = 10


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    opt: M.OptimizerState
    log: list[dict] = field(default_factory=list)
    eval_log: list[dict] = field(default_factory=list)
    steps: int = 0
    final_eval_loss: float = math.nan
    seconds: float = 0.0


def stream_positions(n_tokens: int, tpf: int, action_positions: bool = True) -> np.ndarray:
    T = -(-n_tokens // tpf)
    return positions(T, tpf, action_positions)[:n_tokens]


def corpus_loss(params, cfg: M.ModelConfig, tokens: np.ndarray, tpf: int, action_positions: bool = True,
                batch: int = 8) -> float:
    """Mean next-token NLL over every sequence (eval mode)."""
    tokens = np.atleast_2d(tokens)
    pos = stream_positions(tokens.shape[1] - 1, tpf, action_positions)
    total, count = 0.0, 0
    for i in range(0, len(tokens), batch):
        chunk = tokens[i:i + batch]
        logits = M.forward(chunk[:, :-1], params, cfg, pos)
        n = chunk[:, 1:].size
        total += M.nll_loss(logits, chunk[:, 1:]) * n
        count += n
    return total / count


def train(corpus: Corpus, mcfg: M.ModelConfig, tcfg: TrainConfig, params=None, callback=None) -> TrainResult:
    if corpus.tokens.shape[1] > mcfg.context + 1:
        raise M.ModelError(f"sequence of {corpus.tokens.shape[1]} tokens needs context >= "
                           f"{corpus.tokens.shape[1] - 1}, model has {mcfg.context}")
    if corpus.layout.total != mcfg.vocab:
        raise M.ModelError(f"corpus vocabulary {corpus.layout.total} != model vocab {mcfg.vocab}")
    params = M.init(mcfg) if params is None else params
    opt = M.OptimizerState.zeros_like(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                                      weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0x7A1]))
    n = len(corpus.tokens)
    pos = stream_positions(corpus.tokens.shape[1] - 1, corpus.tpf, tcfg.action_positions)
    use_flip = tcfg.hflip and corpus.flipped is not None
    res = TrainResult(params, opt)
    t0 = time.perf_counter()
    for step in range(1, tcfg.steps + 1):
        idx = rng.choice(n, size=tcfg.batch_size, replace=tcfg.batch_size > n)
        batch = corpus.tokens[idx]
        if use_flip:
            flip = rng.random(tcfg.batch_size) < 0.5
            batch = np.where(flip[:, None], corpus.flipped[idx], batch)
        loss, grads = M.loss_and_grads(batch[:, :-1], batch[:, 1:], params, mcfg, pos,
                                       train_mode=True, dropout_seed=[tcfg.seed, step])
        gnorm = M.adamw_step(params, grads, opt)
        if step % tcfg.log_every == 0 or step == 1:
            res.log.append({"iteration": step, "loss": loss, "grad_norm": gnorm})
        res.steps = step
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            ev = corpus_loss(params, mcfg, corpus.tokens, corpus.tpf, tcfg.action_positions)
            res.eval_log.append({"iteration": step, "eval_loss": ev, "seconds": time.perf_counter() - t0})
            res.final_eval_loss = ev
            log.info("step %d loss %.4f eval %.4f |g| %.3f", step, loss, ev, gnorm)
            if callback is not None:
                callback(step, ev)
            if tcfg.target_loss is not None and ev < tcfg.target_loss:
                break
    res.seconds = time.perf_counter() - t0
    return res


def save_log(path: str | Path, res: TrainResult, tcfg: TrainConfig) -> None:
    Path(path).write_text(json.dumps({"train": asdict(tcfg), "steps": res.steps, "seconds": res.seconds,
                                      "final_eval_loss": res.final_eval_loss, "log": res.log,
                                      "eval": res.eval_log}, indent=1))
