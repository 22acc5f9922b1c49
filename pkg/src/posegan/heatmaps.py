"""Conversions between joint coordinates and per-joint heatmaps.

Ground-truth heatmaps place an unnormalized Gaussian (peak exactly 1.0) at
the quantized joint cell of each visible joint; invisible joints get an
all-zero channel. Decoding takes the per-channel argmax with the lowest
row-major index on ties, mapping cells back to pixels at cell centers:
``x = (col + 0.5) * stride``. An all-zero channel decodes to the center
cell with confidence 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = [
    "HeatmapStack",
    "encode_gaussian",
    "decode_argmax",
    "decode_maps",
    "flip_heatmaps",
    "write_pgm",
    "read_pgm",
]


@dataclass
class HeatmapStack:
    """N per-joint likelihood maps plus the input-pixels-per-cell stride."""

    values: Tensor
    stride: int

    @property
    def n_joints(self) -> int:
        return self.values.shape[0]


def encode_gaussian(
    joints: np.ndarray,
    vis: np.ndarray,
    n_joints: int,
    hm_size: int,
    stride: int,
    sigma: float = 2.0,
) -> HeatmapStack:
    """Per-joint Gaussian heatmaps from pixel-space joints.

    ``joints`` is (N, 2) as (x, y) in input pixels, ``vis`` is (N,) in
    {0, 1}. Each visible joint's channel holds
    ``exp(-((u-cx)^2 + (v-cy)^2) / (2 sigma^2))`` on the cell grid, with
    (cx, cy) = floor((x, y) / stride); the peak at the joint cell is
    exactly 1.0. Invisible joints produce all-zero channels.
    """
    joints = np.asarray(joints, dtype=np.float64)
    vis = np.asarray(vis)
    if joints.shape != (n_joints, 2) or vis.shape != (n_joints,):
        raise ValueError(
            f"joint count mismatch: expected {n_joints} joints, "
            f"got joints {joints.shape} and vis {vis.shape}"
        )
    if hm_size < 1 or sigma <= 0:
        raise ValueError("encode_gaussian: hm_size must be >= 1 and sigma > 0")
    maps = np.zeros((n_joints, hm_size, hm_size))
    grid = np.arange(hm_size, dtype=np.float64)
    uu = grid[None, :]  # columns
    vv = grid[:, None]  # rows
    for n in range(n_joints):
        if vis[n] == 0:
            continue
        cx = np.floor(joints[n, 0] / stride)
        cy = np.floor(joints[n, 1] / stride)
        maps[n] = np.exp(-((uu - cx) ** 2 + (vv - cy) ** 2) / (2.0 * sigma**2))
    return HeatmapStack(Tensor(maps), stride)


def decode_maps(maps: np.ndarray, stride: int) -> np.ndarray:
    """Decode a raw (N, H, W) array; see :func:`decode_argmax`."""
    n, h, w = maps.shape
    out = np.zeros((n, 3))
    for i in range(n):
        m = maps[i]
        conf = m.max()
        if conf == 0.0:
            row, col = h // 2, w // 2
            conf = 0.0
        else:
            flat = int(np.argmax(m))  # first occurrence = lowest row-major index
            row, col = divmod(flat, w)
        out[i] = ((col + 0.5) * stride, (row + 0.5) * stride, conf)
    return out


def decode_argmax(h: HeatmapStack) -> np.ndarray:
    """Per-joint (x, y, confidence) from the channel-wise maximum cell."""
    return decode_maps(h.values.data, h.stride)


def _check_involution(pair_map, n: int) -> list:
    m = list(pair_map)
    if len(m) != n or sorted(m) != list(range(n)) or any(m[m[i]] != i for i in range(n)):
        raise ValueError("pair_map must be an involution over joint indices")
    return m


def flip_heatmaps(h: HeatmapStack, pair_map) -> HeatmapStack:
    """Horizontally mirror every map and swap paired channels (bit-exact)."""
    m = _check_involution(pair_map, h.n_joints)
    flipped = h.values.data[m, :, ::-1].copy()
    return HeatmapStack(Tensor(flipped), h.stride)


# ---------------------------------------------------------------------------
# portable grey-scale dumps (binary PGM, 16-bit big-endian per the format)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0,1] float image as a 16-bit binary PGM (quantized)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm expects a 2-d image, got shape {arr.shape}")
    q = np.round(arr * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a 16-bit binary PGM back to a [0,1] float image."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError("not a binary PGM file")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 65535:
            raise ValueError("expected a 16-bit PGM")
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(2 * w * h), dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / 65535.0
