import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivelm import geometry as G
from drivelm.action_codec import (ActionCodec, ActionTokens, CodecError, ComponentBounds, decode_action,
                                  decode_component, encode_action, encode_component, fit_bounds, flip_action)
from drivelm.geometry import RelativeAction


def test_fit_bounds_nearest_rank():
    assert fit_bounds([2.5] * 7) == ComponentBounds(2.5, 2.5)
    # nearest rank: index ceil(p/100 * n) - 1 -> 0 and 98
    assert fit_bounds(np.arange(100.0)) == ComponentBounds(0.0, 98.0)
    assert fit_bounds([2.0, 1.0]) == ComponentBounds(1.0, 2.0)
    with pytest.raises(CodecError):
        fit_bounds([])


def test_encode_component_examples():
    b = ComponentBounds(0.0, 1.0)
    assert encode_component(0.0, b, 128) == 0
    assert encode_component(1.0, b, 128) == 127
    assert encode_component(7.0, b, 128) == 127
    assert encode_component(-3.0, b, 128) == 0
    assert encode_component(0.5, b, 128) == 63


def test_decode_component_examples():
    b = ComponentBounds(0.0, 1.0)
    assert decode_component(0, b, 2) == 0.5
    assert decode_component(127, b, 128) == 1.0
    with pytest.raises(CodecError):
        decode_component(2, b, 2)


def test_degenerate_bounds():
    b = ComponentBounds(3.0, 3.0)
    assert encode_component(9.0, b, 16) == 0
    assert decode_component(0, b, 16) == 3.0


def make_codec(M=16):
    return ActionCodec(ComponentBounds(-0.1, 1.2), ComponentBounds(-0.3, 0.3), ComponentBounds(-0.2, 0.25), M)


def test_action_extremes():
    c = make_codec()
    lo = RelativeAction(*(b.lo for b in c.bounds))
    hi = RelativeAction(*(b.hi for b in c.bounds))
    assert encode_action(lo, c) == ActionTokens(0, 0, 0)
    assert encode_action(hi, c) == ActionTokens(15, 15, 15)


def test_round_trip_half_bin_exhaustive(rng):
    for M in (2, 16, 128):
        c = make_codec(M)
        lo = np.array([b.lo for b in c.bounds])
        hi = np.array([b.hi for b in c.bounds])
        a = rng.uniform(lo, hi, size=(100_000, 3))
        err = np.abs(c.decode_array(c.encode_array(a)) - a)
        assert np.all(err <= c.half_bin() + 1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(-0.1, 1.2), st.floats(-0.3, 0.3), st.floats(-0.2, 0.25))
def test_scalar_and_vector_agree(x, y, t):
    c = make_codec()
    a = RelativeAction(x, y, t)
    q = encode_action(a, c)
    assert q.as_tuple() == tuple(c.encode_array(a.as_array())[0])
    back = decode_action(q, c).as_array()
    assert np.allclose(back, c.decode_array(np.array(q.as_tuple()))[0])
    assert np.all(np.abs(back - a.as_array()) <= c.half_bin() + 1e-12)


def test_flip():
    a = RelativeAction(1, 0.2, 0.1)
    assert flip_action(a) == RelativeAction(1, -0.2, -0.1)
    assert flip_action(flip_action(a)) == a


def test_flip_mirrors_trajectory(rng):
    acts = [RelativeAction(*v) for v in rng.uniform([-1, -1, -1], [1, 1, 1], size=(10, 3))]
    P = G.integrate(acts)
    Q = G.integrate([flip_action(a) for a in acts])
    mirror = np.diag([1.0, -1.0, 1.0])
    for p, q in zip(P, Q):
        assert np.allclose(mirror @ p @ mirror, q, atol=1e-12)


def test_fit_and_file_round_trip(tmp_path, rng):
    acts = rng.normal(size=(500, 3)) * [1.0, 0.1, 0.05] + [2.0, 0, 0]
    c = ActionCodec.fit(acts, 32)
    path = tmp_path / "codec.json"
    c.save(path)
    assert ActionCodec.load(path) == c
    d = json.loads(path.read_text())
    d["format"] = "other/9"
    with pytest.raises(CodecError):
        ActionCodec.from_dict(d)
