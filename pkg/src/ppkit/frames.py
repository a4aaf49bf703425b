"""Raw YUV 4:2:0 I/O, BT.709 colour conversion and overlapping block tiling.

Frames on disk are planar Y, Cb, Cr with no header.  8-bit samples take one
byte; 10-bit samples are stored LSB-aligned in little-endian 16-bit words.
Frame geometry is always supplied by the caller.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

BLOCK_SIZE = 96
BLOCK_OVERLAP = 4

# BT.709 luma coefficients.
KR, KB = 0.2126, 0.0722
KG = 1.0 - KR - KB


class YuvError(Exception):
    """Base class for raw YUV problems."""


class GeometryError(YuvError, ValueError):
    pass


class ShortFileError(YuvError):
    pass


class SampleRangeError(YuvError, ValueError):
    pass


def _check_depth(bit_depth: int) -> None:
    if bit_depth not in (8, 10):
        raise GeometryError(f"bit depth must be 8 or 10, got {bit_depth}")


def _check_geometry(width: int, height: int) -> None:
    if width <= 0 or height <= 0:
        raise GeometryError(f"frame size must be positive, got {width}x{height}")
    if width % 2 or height % 2:
        raise GeometryError(f"4:2:0 frames need even dimensions, got {width}x{height}")


@dataclass
class PlanarFrame420:
    width: int
    height: int
    bit_depth: int
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        _check_geometry(self.width, self.height)
        _check_depth(self.bit_depth)
        full, half = (self.height, self.width), (self.height // 2, self.width // 2)
        for name, shape in (("y", full), ("cb", half), ("cr", half)):
            plane = np.asarray(getattr(self, name))
            if plane.shape != shape:
                raise GeometryError(f"{name} plane is {plane.shape}, expected {shape}")
            if plane.dtype.kind not in "ui":
                raise SampleRangeError(f"{name} plane must hold integer samples, got {plane.dtype}")
            if plane.size and (plane.min() < 0 or plane.max() > self.max_value):
                raise SampleRangeError(
                    f"{name} plane has samples outside [0, {self.max_value}] for {self.bit_depth}-bit video")
            setattr(self, name, plane.astype(np.uint16))

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y, self.cb, self.cr

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlanarFrame420):
            return NotImplemented
        return ((self.width, self.height, self.bit_depth) == (other.width, other.height, other.bit_depth)
                and all(np.array_equal(a, b) for a, b in zip(self.planes(), other.planes())))


@dataclass
class RgbImage:
    """(3, height, width) array of reals, clamped to [0, 1] on construction."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != 3:
            raise ValueError(f"RGB image must be shaped (3, h, w), got {data.shape}")
        self.data = np.clip(data, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def frame_bytes(width: int, height: int, bit_depth: int) -> int:
    _check_geometry(width, height)
    _check_depth(bit_depth)
    return (width * height * 3 // 2) * (1 if bit_depth == 8 else 2)


def count_frames(path, width: int, height: int, bit_depth: int) -> int:
    return os.path.getsize(path) // frame_bytes(width, height, bit_depth)


def _sample_dtype(bit_depth: int) -> np.dtype:
    return np.dtype(np.uint8) if bit_depth == 8 else np.dtype("<u2")


def frame_from_bytes(raw: bytes, width: int, height: int, bit_depth: int) -> PlanarFrame420:
    size = frame_bytes(width, height, bit_depth)
    if len(raw) != size:
        raise ShortFileError(f"frame needs {size} bytes, got {len(raw)}")
    samples = np.frombuffer(raw, dtype=_sample_dtype(bit_depth))
    n_y, n_c = width * height, width * height // 4
    y = samples[:n_y].reshape(height, width)
    cb = samples[n_y : n_y + n_c].reshape(height // 2, width // 2)
    cr = samples[n_y + n_c :].reshape(height // 2, width // 2)
    return PlanarFrame420(width, height, bit_depth, y, cb, cr)


def frame_to_bytes(frame: PlanarFrame420) -> bytes:
    dt = _sample_dtype(frame.bit_depth)
    return b"".join(np.ascontiguousarray(p, dtype=dt).tobytes() for p in frame.planes())


def read_yuv(path, width: int, height: int, bit_depth: int, frame_index: int = 0) -> PlanarFrame420:
    """Read one frame from a raw planar 4:2:0 file."""
    size = frame_bytes(width, height, bit_depth)
    if frame_index < 0:
        raise ValueError(f"frame index must be >= 0, got {frame_index}")
    total = os.path.getsize(path)
    if total < (frame_index + 1) * size:
        raise ShortFileError(
            f"{path}: {total} bytes holds {total // size} frame(s) of {width}x{height} "
            f"{bit_depth}-bit, frame {frame_index} requested")
    with open(path, "rb") as fh:
        fh.seek(frame_index * size)
        return frame_from_bytes(fh.read(size), width, height, bit_depth)


def iter_yuv(path, width: int, height: int, bit_depth: int):
    for i in range(count_frames(path, width, height, bit_depth)):
        yield read_yuv(path, width, height, bit_depth, i)


def write_yuv(path, frames, append: bool = False) -> None:
    """Write one frame or a sequence of frames."""
    if isinstance(frames, PlanarFrame420):
        frames = [frames]
    with open(path, "ab" if append else "wb") as fh:
        for f in frames:
            fh.write(frame_to_bytes(f))


# Colour conversion (BT.709, limited range)

def _ranges(bit_depth: int) -> tuple[float, float, float, float]:
    s = float(1 << (bit_depth - 8))
    return 16.0 * s, 219.0 * s, 128.0 * s, 224.0 * s


def ycbcr444_to_rgb(y, cb, cr, bit_depth: int) -> RgbImage:
    """Full-resolution limited-range YCbCr samples to RGB in [0, 1]."""
    y_off, y_rng, c_off, c_rng = _ranges(bit_depth)
    ey = (np.asarray(y, np.float64) - y_off) / y_rng
    eb = (np.asarray(cb, np.float64) - c_off) / c_rng
    er = (np.asarray(cr, np.float64) - c_off) / c_rng
    r = ey + 2.0 * (1.0 - KR) * er
    b = ey + 2.0 * (1.0 - KB) * eb
    g = (ey - KR * r - KB * b) / KG
    return RgbImage(np.stack([r, g, b]))


def rgb_to_ycbcr444(img: RgbImage, bit_depth: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RGB to rounded full-resolution limited-range samples (no subsampling)."""
    _check_depth(bit_depth)
    ey, eb, er = _rgb_to_analog(img)
    return _quantize(ey, eb, er, bit_depth)


def _rgb_to_analog(img: RgbImage):
    r, g, b = img.data
    ey = KR * r + KG * g + KB * b
    return ey, (b - ey) / (2.0 * (1.0 - KB)), (r - ey) / (2.0 * (1.0 - KR))


def _quantize(ey, eb, er, bit_depth: int):
    y_off, y_rng, c_off, c_rng = _ranges(bit_depth)
    top = (1 << bit_depth) - 1
    out = []
    for val, off, rng in ((ey, y_off, y_rng), (eb, c_off, c_rng), (er, c_off, c_rng)):
        out.append(np.clip(np.rint(off + rng * val), 0, top).astype(np.uint16))
    return tuple(out)


def upsample_chroma(plane: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)


def downsample_chroma(plane: np.ndarray) -> np.ndarray:
    """Mean of each 2x2 cell."""
    h, w = plane.shape
    return plane.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ycbcr_to_rgb(frame: PlanarFrame420) -> RgbImage:
    return ycbcr444_to_rgb(frame.y, upsample_chroma(frame.cb), upsample_chroma(frame.cr), frame.bit_depth)


def rgb_to_ycbcr(img: RgbImage, bit_depth: int) -> PlanarFrame420:
    _check_depth(bit_depth)
    if img.width % 2 or img.height % 2:
        raise GeometryError(f"4:2:0 frames need even dimensions, got {img.width}x{img.height}")
    ey, eb, er = _rgb_to_analog(img)
    y, cb, cr = _quantize(ey, downsample_chroma(eb), downsample_chroma(er), bit_depth)
    return PlanarFrame420(img.width, img.height, bit_depth, y, cb, cr)


# Block tiling

@dataclass(frozen=True)
class BlockGrid:
    width: int
    height: int
    block: int
    overlap: int
    xs: tuple[int, ...]
    ys: tuple[int, ...]

    @property
    def positions(self) -> list[tuple[int, int]]:
        """Top-left (x, y) corners in row-major order."""
        return [(x, y) for y in self.ys for x in self.xs]

    def __len__(self) -> int:
        return len(self.xs) * len(self.ys)

    def coverage(self) -> np.ndarray:
        """Number of blocks covering each pixel, shape (height, width)."""
        count = np.zeros((self.height, self.width), dtype=np.int64)
        b = self.block
        for x, y in self.positions:
            count[y : y + b, x : x + b] += 1
        return count


def _axis_positions(dim: int, block: int, stride: int) -> tuple[int, ...]:
    pos = list(range(0, dim - block + 1, stride))
    if pos[-1] != dim - block:
        pos.append(dim - block)
    return tuple(pos)


def plan_blocks(width: int, height: int, block: int = BLOCK_SIZE, overlap: int = BLOCK_OVERLAP) -> BlockGrid:
    """Blocks at stride ``block - overlap``; the last one on each axis is clamped to the edge."""
    if not 0 <= overlap < block:
        raise ValueError(f"overlap must be in [0, {block}), got {overlap}")
    if width < block or height < block:
        raise ValueError(f"frame {width}x{height} is smaller than the {block}x{block} block size")
    stride = block - overlap
    return BlockGrid(width, height, block, overlap,
                     _axis_positions(width, block, stride), _axis_positions(height, block, stride))


def _check_grid(grid: BlockGrid, width: int, height: int) -> None:
    if (grid.width, grid.height) != (width, height):
        raise ValueError(f"grid planned for {grid.width}x{grid.height}, image is {width}x{height}")


def extract_planes(planes: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """Cut (c, h, w) planes into (n, c, B, B) blocks in grid order."""
    _check_grid(grid, planes.shape[2], planes.shape[1])
    b = grid.block
    return np.stack([planes[:, y : y + b, x : x + b] for x, y in grid.positions])


def aggregate_planes(blocks: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """Average overlapping blocks back into (c, h, w) planes.

    Each pixel accumulates deviations from the first block that covers it,
    so pixels whose contributions are all equal come back bit-exactly.
    """
    blocks = np.asarray(blocks)
    b = grid.block
    if blocks.ndim != 4 or blocks.shape[0] != len(grid) or blocks.shape[2:] != (b, b):
        raise ValueError(f"expected {len(grid)} blocks of {b}x{b}, got {blocks.shape}")
    c = blocks.shape[1]
    base = np.zeros((c, grid.height, grid.width), dtype=np.float64)
    dev = np.zeros_like(base)
    count = np.zeros((grid.height, grid.width), dtype=np.int64)
    for blk, (x, y) in zip(blocks, grid.positions):
        sl = np.s_[y : y + b, x : x + b]
        fresh = count[sl] == 0
        region = base[(slice(None),) + sl]
        region[:, fresh] = blk[:, fresh]
        dev[(slice(None),) + sl] += np.where(fresh, 0.0, blk - region)
        count[sl] += 1
    return base + dev / count


def extract_blocks(img: RgbImage, grid: BlockGrid) -> np.ndarray:
    """RGB image to network blocks in [-1, 1]."""
    return extract_planes(2.0 * img.data - 1.0, grid)


def aggregate_blocks(blocks, grid: BlockGrid, width: int, height: int) -> RgbImage:
    _check_grid(grid, width, height)
    return RgbImage((aggregate_planes(blocks, grid) + 1.0) * 0.5)


def _as_block_fn(model):
    """Resolve a ModelBundle, Generator or plain callable to ``blocks -> blocks``."""
    from .models import ModelBundle

    if isinstance(model, ModelBundle):
        model = model.generator()
    dtype = getattr(model, "dtype", None)

    def run(batch: np.ndarray) -> np.ndarray:
        x = batch.astype(dtype) if dtype is not None else batch
        out = model(x)
        return np.asarray(out.numpy() if hasattr(out, "numpy") else out, dtype=np.float64)

    block = getattr(getattr(model, "config", None), "input_block_size", BLOCK_SIZE)
    return run, block


def enhance_frame(model, frame: PlanarFrame420, batch_size: int = 8, workers: int = 1) -> PlanarFrame420:
    """Enhance one decoded frame with the generator, block by block.

    Batches may be evaluated on several threads; results are gathered in
    grid order before aggregation, so the output does not depend on
    ``workers``.
    """
    if batch_size < 1 or workers < 1:
        raise ValueError("batch_size and workers must be >= 1")
    run, block = _as_block_fn(model)
    rgb = ycbcr_to_rgb(frame)
    grid = plan_blocks(frame.width, frame.height, block)
    blocks = extract_blocks(rgb, grid)
    batches = [blocks[i : i + batch_size] for i in range(0, len(blocks), batch_size)]
    if workers == 1:
        outputs = [run(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, batches))
    out = aggregate_blocks(np.concatenate(outputs), grid, frame.width, frame.height)
    return rgb_to_ycbcr(out, frame.bit_depth)
