"""Datasets: IDX image/label files and deterministic synthetic generators."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, DataFormatError

IDX_IMAGE_MAGIC = 0x00000803  # unsigned bytes, rank 3
IDX_LABEL_MAGIC = 0x00000801  # unsigned bytes, rank 1

_MAX_ELEMENTS = 1 << 40


def load_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (gzip accepted transparently).

    Images (magic 0x00000803) come back as uint8 [count, rows, cols]; labels
    (magic 0x00000801) as uint8 [count]. The big-endian magic, one 32-bit
    dimension per axis, and the exact payload length are all validated.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(
            f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    if any(d == 0 for d in dims):
        raise DataFormatError(f"{path}: zero-length dimension in {dims}")
    elements = 1
    for d in dims:
        elements *= d
    if elements > _MAX_ELEMENTS:
        raise DataFormatError(f"{path}: dimensions {dims} overflow a sane payload")
    payload = len(raw) - header
    if payload != elements:
        raise DataFormatError(
            f"{path}: payload holds {payload} bytes but dimensions {dims} "
            f"require {elements}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_image_matrix(path: str | Path) -> np.ndarray:
    """IDX images flattened to float64 rows scaled into [0, 1]."""
    images = load_idx(path)
    if images.ndim != 3:
        raise DataFormatError(f"{path}: expected an image file, got rank {images.ndim}")
    count = images.shape[0]
    return images.reshape(count, -1).astype(np.float64) / 255.0


def synthetic_dataset(seed: int, n_train: int, n_test: int, in_dim: int,
                      out_dim: int, rank: int | None = None,
                      target: str = "identity"
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """A deterministic low-rank dataset with an affine or identity target.

    Inputs are a rank-limited linear mix of uniform factors, min-max scaled
    into [0, 1]. ``target='identity'`` returns the inputs themselves
    (reconstruction; requires out_dim == in_dim); ``target='affine'``
    returns ``X @ A + c`` for fixed seeded A, c. Same seed, same arrays.
    """
    if n_train < 1 or n_test < 0:
        raise ConfigurationError("need n_train >= 1 and n_test >= 0")
    if in_dim < 1 or out_dim < 1:
        raise ConfigurationError("dataset widths must be positive")
    if rank is None:
        rank = min(in_dim, 16)
    if not 1 <= rank <= in_dim:
        raise ConfigurationError(f"rank must lie in [1, {in_dim}], got {rank}")
    rng = np.random.default_rng([int(seed), 9157])
    factors = rng.uniform(0.0, 1.0, size=(n_train + n_test, rank))
    mix = rng.uniform(-1.0, 1.0, size=(rank, in_dim))
    x = factors @ mix
    lo = x.min()
    span = x.max() - lo
    x = (x - lo) / (span if span > 0 else 1.0)
    if target == "identity":
        if out_dim != in_dim:
            raise ConfigurationError(
                f"identity target needs out_dim == in_dim, got {out_dim} != {in_dim}")
        y = x
    elif target == "affine":
        a = rng.uniform(-1.0, 1.0, size=(in_dim, out_dim)) / np.sqrt(in_dim)
        c = rng.uniform(0.0, 1.0, size=out_dim)
        y = x @ a + c
    else:
        raise ConfigurationError(f"unknown synthetic target {target!r}")
    return (x[:n_train].copy(), y[:n_train].copy(),
            x[n_train:].copy(), y[n_train:].copy())
