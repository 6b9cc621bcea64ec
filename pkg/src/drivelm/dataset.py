"""On-disk dataset container.

Layout of a dataset directory::

    raw.json                 frame rate, sim config, seeds (written by gen-data)
    raw/seq_00000.npz        images (T, H, W, 3) uint8, actions (T, 3), poses (T+1, 3)
    scenarios/seq_00000.json scenario logs for evaluation reuse
    manifest.json            tokenized-corpus manifest (written by fit)
    codec.json, codebook.dgcb
    records/seq_00000.dgsq   token records; ``*_flip.dgsq`` hold mirrored copies

A DGSQ record is ``<4sIII`` (magic, version, T, tokens per frame), then
``T * tpf`` little-endian u32 token ids, then ``T * 3`` float64 relative actions.
"""

from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import obs_tokenizer
from .action_codec import ActionCodec, ActionTokens
from .language import DrivingSequence, Frame, VocabLayout, serialize
from .world_sim import RawDataset, Scenario, SimConfig

SEQ_MAGIC = b"DGSQ"
SEQ_VERSION = 1
MANIFEST_SCHEMA = "drivelm-dataset/1"
_SEQ_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    pass


def write_record(path: str | Path, tokens: np.ndarray, actions: np.ndarray, tpf: int) -> None:
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
    if tokens.size % tpf or tokens.size // tpf != len(actions):
        raise DatasetError(f"{path}: {tokens.size} tokens / {len(actions)} actions inconsistent with tpf {tpf}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= 2 ** 32):
        raise DatasetError(f"{path}: token ids must fit in u32")
    try:
        with open(path, "wb") as f:
            f.write(_SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, len(actions), tpf))
            f.write(tokens.astype("<u4").tobytes())
            f.write(actions.astype("<f8").tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def read_record(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _SEQ_HEADER.size:
        raise DatasetError(f"{path}: truncated record")
    magic, version, T, tpf = _SEQ_HEADER.unpack_from(raw)
    if magic != SEQ_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != SEQ_VERSION:
        raise DatasetError(f"{path}: unsupported record version {version}")
    n = T * tpf
    expect = _SEQ_HEADER.size + 4 * n + 24 * T
    if len(raw) != expect:
        raise DatasetError(f"{path}: expected {expect} bytes, found {len(raw)}")
    tokens = np.frombuffer(raw, "<u4", n, _SEQ_HEADER.size).astype(np.int64)
    actions = np.frombuffer(raw, "<f8", 3 * T, _SEQ_HEADER.size + 4 * n).reshape(T, 3).copy()
    return tokens, actions, tpf


# ---------------------------------------------------------------- raw frames

def savez_deterministic(path: str | Path, **arrays: np.ndarray) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal inputs give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asarray(arr), allow_pickle=False)


def write_raw(raw: RawDataset, out_dir: str | Path, sim: SimConfig, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    if raw.scenarios:
        (out / "scenarios").mkdir(exist_ok=True)
    for i in range(len(raw.seeds)):
        p = out / "raw" / f"seq_{i:05d}.npz"
        try:
            savez_deterministic(p, images=raw.images[i], actions=raw.actions[i], poses=raw.poses[i])
        except OSError as exc:
            raise DatasetError(f"cannot write {p}: {exc}") from exc
        if raw.scenarios:
            raw.scenarios[i].save(out / "scenarios" / f"seq_{i:05d}.json")
    meta = {"schema": "drivelm-raw/1", "frame_hz": raw.frame_hz, "n_seq": len(raw.seeds),
            "frames_per_seq": int(raw.images.shape[1]), "seeds": raw.seeds, "sim": sim.to_dict(),
            **(extra or {})}
    (out / "raw.json").write_text(json.dumps(meta, indent=2))
    return out


def read_raw(data_dir: str | Path) -> tuple[RawDataset, dict]:
    d = Path(data_dir)
    meta_path = d / "raw.json"
    if not meta_path.exists():
        raise DatasetError(f"{d}: no raw.json (run gen-data first)")
    meta = json.loads(meta_path.read_text())
    imgs, acts, poses = [], [], []
    for i in range(meta["n_seq"]):
        with np.load(d / "raw" / f"seq_{i:05d}.npz") as z:
            imgs.append(z["images"])
            acts.append(z["actions"])
            poses.append(z["poses"])
    raw = RawDataset(np.stack(imgs), np.stack(acts), np.stack(poses), meta["seeds"], meta["frame_hz"])
    return raw, meta


def load_scenarios(data_dir: str | Path) -> list[Scenario]:
    files = sorted((Path(data_dir) / "scenarios").glob("seq_*.json"))
    return [Scenario.load(f) for f in files]


# ---------------------------------------------------------------- tokenized corpus

def tokenize_sequence(images: np.ndarray, actions: np.ndarray, cb: obs_tokenizer.Codebook,
                      codec: ActionCodec, L: VocabLayout) -> np.ndarray:
    grids = obs_tokenizer.encode_batch(np.asarray(images, dtype=np.float32) / 255.0, cb)
    bins = codec.encode_array(actions)
    seq = DrivingSequence([Frame(g, ActionTokens(*map(int, q))) for g, q in zip(grids, bins)])
    return serialize(seq, L)


def flip_actions(actions: np.ndarray) -> np.ndarray:
    out = np.array(actions, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def write_corpus(data_dir: str | Path, raw: RawDataset, cb: obs_tokenizer.Codebook, codec: ActionCodec,
                 include_flips: bool = True, extra: dict | None = None) -> dict:
    """Tokenize every sequence (and its mirror image) and write records plus manifest."""
    d = Path(data_dir)
    (d / "records").mkdir(parents=True, exist_ok=True)
    L = VocabLayout(cb.D, codec.M)
    n, T, H, W, _ = raw.images.shape
    tpf = (H // cb.S) * (W // cb.S) + 3
    cb.save(d / "codebook.dgcb")
    codec.save(d / "codec.json")
    records, flips = [], []
    for i in range(n):
        name = f"seq_{i:05d}.dgsq"
        write_record(d / "records" / name, tokenize_sequence(raw.images[i], raw.actions[i], cb, codec, L),
                     raw.actions[i], tpf)
        records.append(f"records/{name}")
        if include_flips:
            fname = f"seq_{i:05d}_flip.dgsq"
            fa = flip_actions(raw.actions[i])
            write_record(d / "records" / fname,
                         tokenize_sequence(obs_tokenizer.hflip(raw.images[i]), fa, cb, codec, L), fa, tpf)
            flips.append(f"records/{fname}")
    manifest = {
        "schema": MANIFEST_SCHEMA, "D": cb.D, "M": codec.M, "S": cb.S, "H": H, "W": W, "T": T,
        "tokens_per_frame": tpf, "frame_hz": raw.frame_hz, "codec": "codec.json", "codebook": "codebook.dgcb",
        "records": records, "flipped_records": flips, **(extra or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


@dataclass
class Corpus:
    tokens: np.ndarray  # (n, T * tpf)
    actions: np.ndarray  # (n, T, 3)
    tpf: int
    layout: VocabLayout
    flipped: np.ndarray | None = None  # (n, T * tpf) mirrored streams
    manifest: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.tokens.shape[1] // self.tpf


def load_corpus(data_dir: str | Path) -> Corpus:
    d = Path(data_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{d}: no manifest.json (run fit first)")
    m = json.loads(mpath.read_text())
    if m.get("schema") != MANIFEST_SCHEMA:
        raise DatasetError(f"{mpath}: unsupported schema {m.get('schema')!r}")
    toks, acts = [], []
    for r in m["records"]:
        t, a, tpf = read_record(d / r)
        if tpf != m["tokens_per_frame"]:
            raise DatasetError(f"{r}: tokens per frame {tpf} != manifest {m['tokens_per_frame']}")
        toks.append(t)
        acts.append(a)
    flipped = None
    if m.get("flipped_records"):
        flipped = np.stack([read_record(d / r)[0] for r in m["flipped_records"]])
    return Corpus(np.stack(toks), np.stack(acts), m["tokens_per_frame"], VocabLayout(m["D"], m["M"]), flipped, m)


def load_tokenizers(data_dir: str | Path) -> tuple[obs_tokenizer.Codebook, ActionCodec, dict]:
    d = Path(data_dir)
    m = json.loads((d / "manifest.json").read_text())
    return obs_tokenizer.Codebook.load(d / m["codebook"]), ActionCodec.load(d / m["codec"]), m
