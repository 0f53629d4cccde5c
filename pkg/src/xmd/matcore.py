"""Dense matrix primitives shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. Besides the math helpers this
module owns the two fixture formats (whitespace text and the ``XMD1`` binary
container).
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"XMD1"
_HEADER = struct.Struct("<4sQQ")


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def l2_normalize_rows(m, eps: float = 1e-12) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    Rows whose norm is below ``eps`` come back as zeros instead of NaN.
    """
    m = as_matrix(m)
    if m.shape[1] < 1:
        raise ValueError("l2_normalize_rows needs at least one column")
    norms = row_norms(m)
    out = np.zeros_like(m)
    ok = norms >= eps
    out[ok] = m[ok] / norms[ok, None]
    return out


def l2_normalize_rows_backward(m: np.ndarray, grad_out: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows."""
    norms = row_norms(m)
    grad = np.zeros_like(m)
    ok = norms >= eps
    y = m[ok] / norms[ok, None]
    g = grad_out[ok]
    grad[ok] = (g - y * np.einsum("ij,ij->i", y, g)[:, None]) / norms[ok, None]
    return grad


def gram(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]} columns")
    return a @ b.T


def segment_mean_pool(x, labels, num_groups: int) -> np.ndarray:
    """Average the rows of ``x`` that share a group label."""
    x = as_matrix(x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ValueError("need exactly one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= num_groups):
        raise ValueError("group label out of range")
    counts = np.bincount(labels, minlength=num_groups)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"empty group(s): {empty[:10].tolist()}")
    out = np.zeros((num_groups, x.shape[1]))
    np.add.at(out, labels, x)
    return out / counts[:, None]


def logsumexp_row(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    if v.size == 1:
        return float(v[0])
    top = v.max()
    return float(top + math.log(np.exp(v - top).sum()))


def masked_logsumexp(logits: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over the entries where ``keep`` is true.

    Every row must keep at least one entry.
    """
    shifted = np.where(keep, logits, -np.inf)
    top = shifted.max(axis=1)
    return top + np.log(np.exp(shifted - top[:, None]).sum(axis=1))


# -- fixture formats ---------------------------------------------------------


def write_text(path, m) -> None:
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def read_text(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = np.array([float(t) for t in tokens[2:]], dtype=np.float64)
    if values.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {values.size}")
    return values.reshape(rows, cols)


def to_bytes(m) -> bytes:
    m = as_matrix(m)
    return _HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + m.astype("<f8").tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated matrix header")
    magic, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    body = buf[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"expected {rows * cols * 8} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def write_binary(path, m) -> None:
    Path(path).write_bytes(to_bytes(m))


def read_binary(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
