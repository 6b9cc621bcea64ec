"""Patch codebook tokenizer for small top-down images.

Images are (H, W, C) float arrays in [0, 1]. They are cut into non-overlapping
S x S patches, and each patch is replaced by the index of its nearest codeword.
The codebook is fitted with weighted k-means over the distinct patches of a
dataset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DGCB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Codebook:
    codewords: np.ndarray  # (D, S*S*C) float32
    S: int
    C: int = 3

    def __post_init__(self) -> None:
        cw = np.asarray(self.codewords)
        if cw.ndim != 2 or cw.shape[0] < 1 or cw.shape[1] != self.S * self.S * self.C:
            raise TokenizerError(f"codewords must be (D, {self.S * self.S * self.C}), got {cw.shape}")
        if not np.all(np.isfinite(cw)):
            raise TokenizerError("codewords must be finite")
        object.__setattr__(self, "codewords", np.ascontiguousarray(cw, dtype=np.float32))

    @property
    def D(self) -> int:
        return self.codewords.shape[0]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, self.D, self.S, self.C))
            f.write(self.codewords.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise TokenizerError(f"{path}: truncated codebook header")
        magic, version, D, S, C = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise TokenizerError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise TokenizerError(f"{path}: unsupported codebook version {version}")
        n = D * S * S * C
        body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        if body.size != n:
            raise TokenizerError(f"{path}: expected {n} floats, found {body.size}")
        return cls(body.reshape(D, S * S * C).astype(np.float32), S, C)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return (self.S, self.C) == (other.S, other.C) and np.array_equal(self.codewords, other.codewords)


def to_patches(img: np.ndarray, S: int) -> np.ndarray:
    """(H, W, C) image -> (H/S, W/S, S*S*C) patch vectors."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise TokenizerError(f"expected (H, W, C) image, got shape {img.shape}")
    H, W, C = img.shape
    if H % S or W % S:
        raise TokenizerError(f"image {H}x{W} not divisible by patch size {S}")
    p = img.reshape(H // S, S, W // S, S, C).transpose(0, 2, 1, 3, 4)
    return p.reshape(H // S, W // S, S * S * C)


def from_patches(patches: np.ndarray, S: int, C: int) -> np.ndarray:
    gh, gw, _ = patches.shape
    p = patches.reshape(gh, gw, S, S, C).transpose(0, 2, 1, 3, 4)
    return p.reshape(gh * S, gw * S, C)


def _nearest(x: np.ndarray, cw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest codeword, lowest index on ties."""
    x = x.astype(np.float64, copy=False)
    cw = cw.astype(np.float64, copy=False)
    d = (x * x).sum(1)[:, None] - 2.0 * x @ cw.T + (cw * cw).sum(1)[None, :]
    idx = np.argmin(d, axis=1)
    return idx, np.maximum(d[np.arange(len(x)), idx], 0.0)


def fit_codebook(images: np.ndarray, D: int, S: int, seed: int = 0, iters: int = 20) -> Codebook:
    """Weighted k-means over the distinct S x S patches of ``images``.

    ``images`` is an (N, H, W, C) array. Initialisation is k-means++ driven by
    ``seed``; clusters that end up empty are re-seeded with the patch farthest
    from its current centroid.
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise TokenizerError("expected a non-empty (N, H, W, C) image stack")
    if D < 1:
        raise TokenizerError("D must be >= 1")
    C = images.shape[3]
    patches = np.concatenate([to_patches(im, S).reshape(-1, S * S * C) for im in images])
    uniq, counts = np.unique(patches.astype(np.float64), axis=0, return_counts=True)
    w = counts.astype(np.float64)
    rng = np.random.default_rng(seed)

    # k-means++ seeding on the weighted distinct patches
    centers = np.empty((D, uniq.shape[1]))
    first = rng.choice(len(uniq), p=w / w.sum())
    centers[0] = uniq[first]
    best = ((uniq - centers[0]) ** 2).sum(1)
    for k in range(1, D):
        mass = w * best
        if mass.sum() <= 0:
            i = int(np.argmax(best))
        else:
            i = rng.choice(len(uniq), p=mass / mass.sum())
        centers[k] = uniq[i]
        best = np.minimum(best, ((uniq - centers[k]) ** 2).sum(1))

    for _ in range(iters):
        idx, dist = _nearest(uniq, centers)
        sums = np.zeros_like(centers)
        np.add.at(sums, idx, uniq * w[:, None])
        mass = np.bincount(idx, weights=w, minlength=D)
        new = centers.copy()
        live = mass > 0
        new[live] = sums[live] / mass[live, None]
        dead = np.flatnonzero(~live)
        if dead.size:
            order = np.argsort(-dist, kind="stable")
            for k, i in zip(dead, order):
                new[k] = uniq[i]
        if np.array_equal(new, centers):
            break
        centers = new
    return Codebook(centers.astype(np.float32), S, C)


def encode(img: np.ndarray, cb: Codebook) -> np.ndarray:
    """(H, W, C) image -> (H/S, W/S) grid of codeword indices."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != cb.C:
        raise TokenizerError(f"image shape {img.shape} incompatible with codebook channels {cb.C}")
    p = to_patches(img, cb.S)
    gh, gw, n = p.shape
    idx, _ = _nearest(p.reshape(-1, n), cb.codewords)
    return idx.reshape(gh, gw).astype(np.int64)


def encode_batch(images: np.ndarray, cb: Codebook) -> np.ndarray:
    images = np.asarray(images)
    N, H, W, C = images.shape
    S = cb.S
    if H % S or W % S or C != cb.C:
        raise TokenizerError(f"images {images.shape} incompatible with codebook (S={S}, C={cb.C})")
    p = images.reshape(N, H // S, S, W // S, S, C).transpose(0, 1, 3, 2, 4, 5).reshape(-1, S * S * C)
    idx, _ = _nearest(p, cb.codewords)
    return idx.reshape(N, H // S, W // S).astype(np.int64)


def decode(grid: np.ndarray, cb: Codebook) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise TokenizerError(f"expected a 2-D token grid, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() >= cb.D):
        raise TokenizerError(f"token index outside [0, {cb.D})")
    return from_patches(cb.codewords[grid], cb.S, cb.C)


def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror image columns (works on (H, W, C) or (N, H, W, C))."""
    return np.ascontiguousarray(np.asarray(img)[..., ::-1, :])


def quantization_mse(images: np.ndarray, cb: Codebook) -> float:
    images = np.asarray(images, dtype=np.float64)
    rec = np.stack([decode(encode(im, cb), cb) for im in images])
    return float(np.mean((rec - images) ** 2))
