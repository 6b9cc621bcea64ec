import math

import numpy as np
import pytest

from drivelm import model as M
from drivelm.model import ModelConfig, ModelError, OptimizerState


def f64(**kw):
    base = dict(vocab=11, context=24, layers=2, width=32, heads=4, token_dropout=0.0, seed=7, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def test_default_config_size():
    cfg = ModelConfig()
    assert cfg.ffn_hidden == 344
    assert M.count_params(M.init(cfg)) == 869_504


def test_init_deterministic():
    a, b = M.init(ModelConfig(seed=4)), M.init(ModelConfig(seed=4))
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)


def test_invalid_configs():
    with pytest.raises(ModelError):
        ModelConfig(width=0)
    with pytest.raises(ModelError):
        ModelConfig(width=30, heads=4)


def test_rotary_identity_norm_and_relative(rng):
    q, k = rng.normal(size=(2, 16))
    q0, k0 = M.apply_rotary(q, k, 0)
    assert np.array_equal(q0, q) and np.array_equal(k0, k)
    for pos in (1, 17, 1000):
        qr, _ = M.apply_rotary(q, k, pos)
        assert abs(np.linalg.norm(qr) - np.linalg.norm(q)) < 1e-12
    for m, n in [(3, 1), (10, 4), (0, 7)]:
        a = M.apply_rotary(q, q, m)[0] @ M.apply_rotary(k, k, n)[1]
        b = M.apply_rotary(q, q, m + 5)[0] @ M.apply_rotary(k, k, n + 5)[1]
        assert abs(a - b) < 1e-9


def test_forward_shapes_and_determinism(rng):
    cfg = f64()
    p = M.init(cfg)
    assert M.forward([3], p, cfg).shape == (1, 11)
    toks = rng.integers(0, 11, size=(2, 9))
    a, b = M.forward(toks, p, cfg), M.forward(toks, p, cfg)
    assert a.shape == (2, 9, 11) and np.array_equal(a, b)
    with pytest.raises(ModelError):
        M.forward(np.zeros(25, int), p, cfg)


def test_causality_exact(rng):
    cfg = ModelConfig(vocab=20, context=30, layers=2, width=32, heads=2, seed=1)
    p = M.init(cfg)
    for _ in range(20):
        toks = rng.integers(0, 20, size=30)
        pos = np.repeat(np.arange(10), 3)
        base = M.forward(toks, p, cfg, pos)
        t = int(rng.integers(1, 30))
        pert = toks.copy()
        pert[t:] = rng.integers(0, 20, size=30 - t)
        assert np.array_equal(M.forward(pert, p, cfg, pos)[:t], base[:t])


def test_kv_decoder_matches_forward(rng):
    cfg = f64()
    p = M.init(cfg)
    toks = rng.integers(0, 11, size=20)
    pos = np.repeat(np.arange(5), 4)
    full = M.forward(toks, p, cfg, pos)
    dec = M.KVDecoder(p, cfg)
    got = np.concatenate([dec.feed(toks[:7], pos[:7]), dec.feed(toks[7:8], pos[7:8]), dec.feed(toks[8:], pos[8:])])
    assert np.allclose(got, full, atol=1e-12)
    assert dec.length == 20
    with pytest.raises(ModelError):
        dec.feed(np.zeros(5, int), np.zeros(5, int))


def naive_nll(logits, targets):
    out = []
    for row, t in zip(logits.reshape(-1, logits.shape[-1]), targets.ravel()):
        p = [math.exp(v) for v in row]
        out.append(-math.log(p[t] / sum(p)))
    return sum(out) / len(out)


def test_nll_values(rng):
    V = 304
    assert abs(M.nll_loss(np.zeros((5, V)), np.arange(5)) - math.log(V)) < 1e-10
    onehot = np.full((3, 7), -1e3)
    onehot[np.arange(3), [1, 4, 6]] = 1e3
    assert M.nll_loss(onehot, np.array([1, 4, 6])) < 1e-12
    logits = rng.normal(size=(4, 6, 9))
    targets = rng.integers(0, 9, size=(4, 6))
    assert abs(M.nll_loss(logits, targets) - naive_nll(logits, targets)) < 1e-10
    g = M.nll_grad(logits, targets)
    assert np.allclose(g.sum(-1), 0.0, atol=1e-15)


def test_initial_loss_near_log_vocab(rng):
    cfg = ModelConfig()
    toks = rng.integers(0, cfg.vocab, size=(4, cfg.context + 1))
    loss = M.nll_loss(M.forward(toks[:, :-1], M.init(cfg), cfg), toks[:, 1:])
    assert abs(loss - math.log(cfg.vocab)) < 0.15


def test_gradients_match_finite_differences(rng):
    cfg = f64()
    p = M.init(cfg)
    for n in p:  # move off the symmetric init so every path carries gradient
        p[n] = p[n] + rng.normal(0, 0.05, size=p[n].shape)
    toks = rng.integers(0, cfg.vocab, size=(2, 13))
    pos = np.repeat(np.arange(4), 3)
    loss_of = lambda: M.nll_loss(M.forward(toks[:, :-1], p, cfg, pos), toks[:, 1:])
    _, grads = M.loss_and_grads(toks[:, :-1], toks[:, 1:], p, cfg, pos)
    names = list(p)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        n = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in p[n].shape)
        old = p[n][idx]
        p[n][idx] = old + h
        up = loss_of()
        p[n][idx] = old - h
        down = loss_of()
        p[n][idx] = old
        num = (up - down) / (2 * h)
        ana = grads[n][idx]
        worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-8))
    assert worst < 1e-4


def test_unused_embedding_rows_get_zero_grad():
    cfg = f64()
    p = M.init(cfg)
    toks = np.array([[1, 2, 3, 1, 2]])
    _, g = M.loss_and_grads(toks[:, :-1], toks[:, 1:], p, cfg)
    unused = [i for i in range(cfg.vocab) if i not in (1, 2, 3)]
    assert not g["tok_emb"][unused].any()


def test_token_dropout_zeroes_embeddings():
    cfg = f64(token_dropout=0.5)
    p = M.init(cfg)
    toks = np.arange(10)[None] % 11
    _, cache = M.forward(toks, p, cfg, train_mode=True, dropout_seed=3, keep_cache=True)
    a = M.forward(toks, p, cfg, train_mode=True, dropout_seed=3)
    b = M.forward(toks, p, cfg, train_mode=True, dropout_seed=3)
    assert np.array_equal(a, b)
    assert not cache["keep"].all()
    assert np.array_equal(M.forward(toks, p, cfg), M.forward(toks, p, cfg, train_mode=False, dropout_seed=3))


def test_adamw_zero_grad_no_decay():
    p = {"w": np.array([[1.0, -2.0]])}
    opt = OptimizerState.zeros_like(p, weight_decay=0.0)
    M.adamw_step(p, {"w": np.zeros((1, 2))}, opt)
    assert np.array_equal(p["w"], [[1.0, -2.0]])


def test_adamw_single_step_by_hand():
    lr, b1, b2, wd, eps = 1e-2, 0.9, 0.95, 0.1, 1e-8
    p = {"w": np.array([[0.5]]), "g": np.array([2.0])}
    opt = OptimizerState.zeros_like(p, lr=lr, beta1=b1, beta2=b2, weight_decay=wd, clip_norm=100.0, eps=eps)
    M.adamw_step(p, {"w": np.array([[0.3]]), "g": np.array([-0.4])}, opt)
    # step 1: m_hat = g, v_hat = g^2 -> update = g / (|g| + eps)
    w = 0.5 * (1 - lr * wd) - lr * 0.3 / (0.3 + eps)
    g = 2.0 - lr * (-0.4) / (0.4 + eps)  # 1-D gains are not decayed
    assert abs(p["w"][0, 0] - w) < 1e-12
    assert abs(p["g"][0] - g) < 1e-12


def test_adamw_clips_global_norm():
    p = {"a": np.zeros((1, 2))}
    opt = OptimizerState.zeros_like(p, weight_decay=0.0, clip_norm=1.0)
    norm = M.adamw_step(p, {"a": np.array([[6.0, 8.0]])}, opt)
    assert norm == 10.0
    assert np.allclose(opt.m["a"], 0.1 * np.array([[0.6, 0.8]]))


def test_adamw_rejects_non_finite():
    p = {"a": np.zeros((1, 1))}
    with pytest.raises(M.TrainingDivergedError):
        M.adamw_step(p, {"a": np.array([[np.nan]])}, OptimizerState.zeros_like(p))


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = ModelConfig(vocab=13, context=10, layers=1, width=16, heads=2)
    p = M.init(cfg)
    opt = OptimizerState.zeros_like(p, lr=3e-4)
    toks = rng.integers(0, 13, size=(1, 8))
    _, g = M.loss_and_grads(toks[:, :-1], toks[:, 1:], p, cfg)
    M.adamw_step(p, g, opt)
    path = tmp_path / "m.dgck"
    M.save_checkpoint(path, p, cfg, opt, {"note": 1})
    ck = M.load_checkpoint(path)
    assert ck.cfg == cfg and ck.extra == {"note": 1}
    assert all(np.array_equal(ck.params[n], p[n]) for n in p)
    assert ck.opt.step == 1 and ck.opt.lr == 3e-4
    assert all(np.array_equal(ck.opt.v[n], opt.v[n]) for n in p)
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0")
    with pytest.raises(ModelError):
        M.load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelError):
        M.load_checkpoint(path)
