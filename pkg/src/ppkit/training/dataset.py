"""Paired training blocks cut from compressed and original sequences.

Dataset file layout (little-endian)::

    "PPKD"  u16 version  u32 block  u32 count  u32 meta_len  meta (JSON)
    compressed blocks   count x 3 x block x block  uint16
    original blocks     count x 3 x block x block  uint16
    index               count x 5 int32  (source, frame, x, y, quarter_turns)

Samples are RGB values in [0, 1] stored as round(v * 65535).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..frames import BLOCK_SIZE, count_frames, frame_bytes, read_yuv, ycbcr_to_rgb

MAGIC = b"PPKD"
VERSION = 1
SAMPLE_MAX = 65535


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SequencePair:
    compressed: str
    original: str
    width: int
    height: int
    bit_depth: int = 10


def to_samples(rgb01: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgb01, 0.0, 1.0) * SAMPLE_MAX).astype(np.uint16)


def from_samples(samples: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint16 samples to network range [-1, 1]."""
    return (samples.astype(np.float64) * (2.0 / SAMPLE_MAX) - 1.0).astype(dtype)


def crop_block(rgb: np.ndarray, x: int, y: int, turns: int, block: int = BLOCK_SIZE) -> np.ndarray:
    """(3, h, w) image -> (3, block, block) crop rotated by ``turns`` quarter turns."""
    return np.rot90(rgb[:, y : y + block, x : x + block], k=turns, axes=(1, 2))


@dataclass
class BlockPairDataset:
    compressed: np.ndarray  # (n, 3, B, B) uint16
    original: np.ndarray
    index: np.ndarray  # (n, 5) int32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.compressed = np.ascontiguousarray(self.compressed, dtype=np.uint16)
        self.original = np.ascontiguousarray(self.original, dtype=np.uint16)
        self.index = np.ascontiguousarray(self.index, dtype=np.int32).reshape(-1, 5)
        if self.compressed.shape != self.original.shape:
            raise DatasetError(f"pair shapes differ: {self.compressed.shape} vs {self.original.shape}")
        if self.compressed.ndim != 4 or self.compressed.shape[1] != 3 or \
                self.compressed.shape[2] != self.compressed.shape[3]:
            raise DatasetError(f"blocks must be (n, 3, B, B), got {self.compressed.shape}")
        if len(self.index) != len(self.compressed):
            raise DatasetError(f"index has {len(self.index)} rows for {len(self.compressed)} pairs")

    @classmethod
    def from_arrays(cls, compressed01: np.ndarray, original01: np.ndarray, codec: str = "VVC",
                    qp_group: str = "QP37", **meta) -> "BlockPairDataset":
        """Wrap in-memory RGB blocks in [0, 1]; index rows are left as -1."""
        n = len(compressed01)
        index = np.full((n, 5), -1, dtype=np.int32)
        return cls(to_samples(compressed01), to_samples(original01), index,
                   {"codec": codec, "qp_group": qp_group, **meta})

    def __len__(self) -> int:
        return len(self.compressed)

    @property
    def block_size(self) -> int:
        return self.compressed.shape[2]

    @property
    def codec(self) -> str:
        return self.meta.get("codec", "VVC")

    @property
    def qp_group(self) -> str:
        return self.meta.get("qp_group", "QP37")

    def batch(self, idx, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """(compressed, original) blocks in [-1, 1]."""
        idx = np.asarray(idx)
        return from_samples(self.compressed[idx], dtype), from_samples(self.original[idx], dtype)

    def subset(self, idx) -> "BlockPairDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return BlockPairDataset(self.compressed[idx], self.original[idx], self.index[idx], dict(self.meta))

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        head = MAGIC + struct.pack("<HIII", VERSION, self.block_size, len(self), len(meta)) + meta
        return b"".join([head, self.compressed.astype("<u2").tobytes(), self.original.astype("<u2").tobytes(),
                         self.index.astype("<i4").tobytes()])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BlockPairDataset":
        if raw[:4] != MAGIC:
            raise DatasetError("not a block-pair dataset (bad magic bytes)")
        if len(raw) < 18:
            raise DatasetError("dataset header truncated")
        version, block, count, meta_len = struct.unpack("<HIII", raw[4:18])
        if version != VERSION:
            raise DatasetError(f"dataset version {version}, this build reads {VERSION}")
        pos = 18 + meta_len
        per = 3 * block * block
        need = pos + 2 * count * per * 2 + count * 5 * 4
        if len(raw) != need:
            raise DatasetError(f"dataset file has {len(raw)} bytes, expected {need}")
        meta = json.loads(raw[18:pos].decode("utf-8"))
        shape = (count, 3, block, block)
        comp = np.frombuffer(raw, "<u2", count * per, pos).reshape(shape)
        pos += count * per * 2
        orig = np.frombuffer(raw, "<u2", count * per, pos).reshape(shape)
        pos += count * per * 2
        index = np.frombuffer(raw, "<i4", count * 5, pos).reshape(count, 5)
        return cls(comp, orig, index, meta)

    @classmethod
    def load(cls, path) -> "BlockPairDataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _validate_pair(pair: SequencePair, block: int) -> int:
    frame_bytes(pair.width, pair.height, pair.bit_depth)
    if pair.width < block or pair.height < block:
        raise DatasetError(f"{pair.compressed}: frame {pair.width}x{pair.height} is smaller than "
                           f"the {block}x{block} block size")
    sizes = [os.path.getsize(p) for p in (pair.compressed, pair.original)]
    fb = frame_bytes(pair.width, pair.height, pair.bit_depth)
    for p, s in zip((pair.compressed, pair.original), sizes):
        if s == 0 or s % fb:
            raise DatasetError(f"{p}: {s} bytes is not a whole number of {pair.width}x{pair.height} "
                               f"{pair.bit_depth}-bit frames")
    if sizes[0] != sizes[1]:
        raise DatasetError(f"{pair.compressed} and {pair.original} hold different frame counts "
                           f"({sizes[0] // fb} vs {sizes[1] // fb})")
    return count_frames(pair.compressed, pair.width, pair.height, pair.bit_depth)


def build_dataset(pairs: list[SequencePair], blocks_per_frame: int, frames_per_sequence: int,
                  seed: int, codec: str = "VVC", qp_group: str = "QP37",
                  block: int = BLOCK_SIZE) -> BlockPairDataset:
    """Random co-located, co-rotated crops from randomly chosen frames.

    All pairs are validated before any frame is decoded.
    """
    if not pairs:
        raise DatasetError("no sequence pairs given")
    if blocks_per_frame < 1 or frames_per_sequence < 1:
        raise DatasetError("blocks_per_frame and frames_per_sequence must be >= 1")
    counts = [_validate_pair(p, block) for p in pairs]
    rng = np.random.default_rng(seed)
    comp, orig, index = [], [], []
    for src, (pair, n_frames) in enumerate(zip(pairs, counts)):
        take = min(frames_per_sequence, n_frames)
        frames = np.sort(rng.choice(n_frames, size=take, replace=False))
        for fi in frames:
            a = ycbcr_to_rgb(read_yuv(pair.compressed, pair.width, pair.height, pair.bit_depth, int(fi))).data
            b = ycbcr_to_rgb(read_yuv(pair.original, pair.width, pair.height, pair.bit_depth, int(fi))).data
            for _ in range(blocks_per_frame):
                x = int(rng.integers(0, pair.width - block + 1))
                y = int(rng.integers(0, pair.height - block + 1))
                turns = int(rng.integers(0, 4))
                comp.append(to_samples(crop_block(a, x, y, turns, block)))
                orig.append(to_samples(crop_block(b, x, y, turns, block)))
                index.append((src, int(fi), x, y, turns))
    meta = {"codec": codec, "qp_group": qp_group, "seed": seed,
            "sources": [[p.compressed, p.original, p.width, p.height, p.bit_depth] for p in pairs]}
    return BlockPairDataset(np.stack(comp), np.stack(orig), np.array(index), meta)
