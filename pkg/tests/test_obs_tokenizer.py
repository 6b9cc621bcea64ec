import numpy as np
import pytest

from drivelm import obs_tokenizer as O
from drivelm.obs_tokenizer import Codebook, TokenizerError


def test_single_codeword_is_mean_patch(rng):
    imgs = rng.random((3, 8, 8, 3)).astype(np.float32)
    cb = O.fit_codebook(imgs, D=1, S=4)
    patches = np.concatenate([O.to_patches(im, 4).reshape(-1, 48) for im in imgs])
    assert np.allclose(cb.codewords[0], patches.mean(0), atol=1e-6)


def test_distinct_constant_patches_recovered():
    shades = np.array([0.0, 0.25, 0.5, 1.0])
    img = np.zeros((8, 8, 3), np.float32)
    for i, v in enumerate(shades):
        r, c = divmod(i, 2)
        img[4 * r:4 * r + 4, 4 * c:4 * c + 4] = v
    cb = O.fit_codebook(img[None], D=4, S=4, seed=5)
    got = sorted(cb.codewords[:, 0].tolist())
    assert np.allclose(got, shades)
    assert np.allclose(cb.codewords, cb.codewords[:, :1])


def test_same_seed_bitwise(rng):
    imgs = rng.random((4, 16, 16, 3)).astype(np.float32)
    a = O.fit_codebook(imgs, 8, 4, seed=2)
    b = O.fit_codebook(imgs, 8, 4, seed=2)
    assert a == b and a.codewords.tobytes() == b.codewords.tobytes()


def test_grid_shape_and_constant_image():
    cb = Codebook(np.full((1, 8 * 8 * 3), 0.3, np.float32), 8)
    grid = O.encode(np.full((32, 32, 3), 0.7, np.float32), cb)
    assert grid.shape == (4, 4) and not grid.any()


def test_checkerboard_two_codewords():
    S = 2
    black, white = np.zeros(S * S * 3), np.ones(S * S * 3)
    cb = Codebook(np.stack([black, white]).astype(np.float32), S)
    img = np.zeros((8, 8, 3), np.float32)
    for r in range(4):
        for c in range(4):
            if (r + c) % 2:
                img[S * r:S * r + S, S * c:S * c + S] = 0.9
    grid = O.encode(img, cb)
    assert np.array_equal(grid, np.indices((4, 4)).sum(0) % 2)


def test_ties_go_to_lowest_index():
    cb = Codebook(np.array([np.zeros(12), np.ones(12), np.zeros(12)], np.float32), 2)
    grid = O.encode(np.full((2, 2, 3), 0.5, np.float32), cb)  # equidistant to all three
    assert grid[0, 0] == 0


def test_decode_fixed_point_and_zero_grid(rng):
    cb = Codebook(rng.random((5, 4 * 4 * 3)).astype(np.float32), 4)
    grid = rng.integers(0, 5, size=(3, 2))
    img = O.decode(grid, cb)
    assert img.shape == (12, 8, 3)
    assert np.array_equal(O.encode(img, cb), grid)
    assert np.array_equal(O.decode(grid, cb), img)
    zero = O.decode(np.zeros((2, 2), int), cb)
    assert np.array_equal(zero[:4, :4].ravel(), O.from_patches(cb.codewords[[[0]]], 4, 3).ravel())
    with pytest.raises(TokenizerError):
        O.decode(np.array([[5]]), cb)


def test_batch_matches_single(rng):
    cb = Codebook(rng.random((7, 4 * 4 * 3)).astype(np.float32), 4)
    imgs = rng.random((3, 8, 12, 3)).astype(np.float32)
    assert np.array_equal(O.encode_batch(imgs, cb), np.stack([O.encode(im, cb) for im in imgs]))


def test_beats_mean_patch_on_heldout():
    from drivelm.world_sim import build_dataset
    raw = build_dataset(6, 6, 2.0, seed=3)
    imgs = raw.images.reshape(-1, 32, 32, 3).astype(np.float32) / 255
    train, held = imgs[:24], imgs[24:]
    cb = O.fit_codebook(train, 32, 8, seed=0)
    mean = Codebook(np.concatenate([O.to_patches(im, 8).reshape(-1, 192) for im in train]).mean(0, keepdims=True), 8)
    assert O.quantization_mse(held, cb) <= O.quantization_mse(held, mean)


def test_hflip_involution(rng):
    x = rng.random((2, 4, 6, 3))
    assert np.array_equal(O.hflip(O.hflip(x)), x)
    assert np.array_equal(O.hflip(x[0])[:, 0], x[0][:, -1])


def test_file_round_trip(tmp_path, rng):
    cb = Codebook(rng.random((6, 2 * 2 * 3)).astype(np.float32), 2)
    p = tmp_path / "cb.dgcb"
    cb.save(p)
    assert p.read_bytes()[:4] == b"DGCB"
    assert Codebook.load(p) == cb
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TokenizerError):
        Codebook.load(p)


def test_bad_shapes():
    with pytest.raises(TokenizerError):
        O.to_patches(np.zeros((10, 8, 3)), 4)
