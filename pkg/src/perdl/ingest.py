"""Matrix files, image patching, and imbalanced client splits.

Binary matrix layout (all little-endian)::

    offset 0   4 bytes  magic b"PDLM"
    offset 4   u32      format version (1)
    offset 8   u64      rows
    offset 16  u64      cols
    offset 24  f64[rows * cols] row-major payload

The CSV form has a first line ``rows,cols`` giving the dimensions, followed
by one comma-separated line per matrix row, written with 17 significant
digits.

Patch vectors are laid out channel by channel; within a channel the patch
pixels are row-major. With ``channels="gray"`` colour frames are averaged
over their last axis first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import rng as rng_mod

MAGIC = b"PDLM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class MatrixFormatError(ValueError):
    pass


def write_matrix(A, path) -> None:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("refusing to write non-finite entries")
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _write_csv(A, path)
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, A.shape[0], A.shape[1]))
        fh.write(np.ascontiguousarray(A, dtype="<f8").tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise MatrixFormatError(
            f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise MatrixFormatError(f"{path}: unsupported format version {version} at byte 4")
    expected = rows * cols * 8
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise MatrixFormatError(
            f"{path}: payload length {actual} bytes, expected {expected} for {rows}x{cols}")
    A = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(A.ravel()))
    if bad.size:
        raise MatrixFormatError(
            f"{path}: non-finite entry at byte offset {_HEADER.size + 8 * int(bad[0])}")
    return A.astype(float)


def _write_csv(A: np.ndarray, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]},{A.shape[1]}\n")
        for row in A:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _read_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixFormatError(f"{path}: empty file")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise MatrixFormatError(f"{path}:1: expected 'rows,cols' header, got {lines[0]!r}")
    body = [ln for ln in lines[1:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != rows:
        raise MatrixFormatError(f"{path}: header says {rows} rows, found {len(body)}")
    A = np.empty((rows, cols))
    for i, line in enumerate(body):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != cols:
            raise MatrixFormatError(f"{path}:{lineno}: expected {cols} values, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise MatrixFormatError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise MatrixFormatError(f"{path}:{lineno}: non-finite entry")
        A[i] = vals
    return A


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry. ``stride=None`` tiles without overlap."""

    height: int
    width: int
    stride: int | tuple[int, int] | None = None
    channels: Literal["gray", "stack"] = "stack"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("patch dimensions must be >= 1")
        sy, sx = self.strides
        if sy < 1 or sx < 1:
            raise ValueError("stride must be >= 1")
        if self.channels not in ("gray", "stack"):
            raise ValueError(f"unknown channel mode {self.channels!r}")

    @property
    def strides(self) -> tuple[int, int]:
        if self.stride is None:
            return self.height, self.width
        if isinstance(self.stride, int):
            return self.stride, self.stride
        return tuple(self.stride)

    def grid(self, H: int, W: int) -> tuple[list[int], list[int]]:
        if self.height > H or self.width > W:
            raise ValueError(f"patch {self.height}x{self.width} larger than frame {H}x{W}")
        sy, sx = self.strides
        return list(range(0, H - self.height + 1, sy)), list(range(0, W - self.width + 1, sx))


# 480x640x3 frames cut into a 40x40 grid of 12x16 colour patches give
# 576-dimensional columns, 1600 per frame.
SURVEILLANCE_PATCHES = PatchConfig(12, 16, channels="stack")


def _prepare(frame, cfg: PatchConfig) -> np.ndarray:
    F = np.asarray(frame, dtype=float)
    if F.ndim == 2:
        F = F[:, :, None]
    elif F.ndim != 3:
        raise ValueError(f"frames must be 2-D or 3-D, got shape {F.shape}")
    if cfg.channels == "gray":
        F = F.mean(axis=2, keepdims=True)
    return F


def frames_to_patches(frames: Sequence, cfg: PatchConfig) -> list[np.ndarray]:
    """One ``(patch_dim, n_patches)`` data matrix per frame.

    Patches are enumerated row-major over the patch grid.
    """
    out = []
    shape = None
    for idx, frame in enumerate(frames):
        F = _prepare(frame, cfg)
        if shape is None:
            shape = F.shape
        elif F.shape != shape:
            raise ValueError(f"frame {idx} has shape {F.shape}, expected {shape}")
        ys, xs = cfg.grid(F.shape[0], F.shape[1])
        cols = [F[y:y + cfg.height, x:x + cfg.width, :].transpose(2, 0, 1).ravel()
                for y in ys for x in xs]
        out.append(np.column_stack(cols))
    return out


def patches_to_frames(matrices: Sequence, cfg: PatchConfig,
                      frame_shape: tuple[int, ...]) -> list[np.ndarray]:
    """Inverse of :func:`frames_to_patches`; overlapping pixels are averaged.

    ``frame_shape`` is ``(H, W)`` or ``(H, W, C)`` of the original frames.
    Gray mode always returns 2-D frames.
    """
    H, W = frame_shape[:2]
    C = 1 if cfg.channels == "gray" or len(frame_shape) == 2 else frame_shape[2]
    ys, xs = cfg.grid(H, W)
    dim = C * cfg.height * cfg.width
    frames = []
    for idx, M in enumerate(matrices):
        M = np.asarray(M, dtype=float)
        if M.shape != (dim, len(ys) * len(xs)):
            raise ValueError(
                f"matrix {idx} has shape {M.shape}, expected {(dim, len(ys) * len(xs))}")
        acc = np.zeros((H, W, C))
        hits = np.zeros((H, W, 1))
        k = 0
        for y in ys:
            for x in xs:
                patch = M[:, k].reshape(C, cfg.height, cfg.width).transpose(1, 2, 0)
                acc[y:y + cfg.height, x:x + cfg.width] += patch
                hits[y:y + cfg.height, x:x + cfg.width] += 1
                k += 1
        F = np.divide(acc, hits, out=np.zeros_like(acc), where=hits > 0)
        frames.append(F[:, :, 0] if C == 1 and (cfg.channels == "gray" or len(frame_shape) == 2)
                      else F)
    return frames


@dataclass(frozen=True)
class ClientDataset:
    data: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray

    def histogram(self) -> dict[int, int]:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def imbalanced_counts(labels: Sequence[int], majority_label: int, majority_fraction: float,
                      count: int) -> dict[int, int]:
    """Per-label sample counts: ``floor(fraction * count)`` majority, rest spread evenly.

    Leftover samples that do not divide evenly go to the smallest other labels.
    """
    if not 0 <= majority_fraction <= 1:
        raise ValueError("majority_fraction must lie in [0, 1]")
    others = sorted(int(v) for v in set(labels) if v != majority_label)
    n_major = int(np.floor(majority_fraction * count + 1e-9))
    rest = count - n_major
    counts = {int(majority_label): n_major}
    if rest:
        if not others:
            raise ValueError("pool has no minority labels to draw the remainder from")
        base, extra = divmod(rest, len(others))
        for j, lab in enumerate(others):
            counts[lab] = base + (1 if j < extra else 0)
    return {k: v for k, v in counts.items() if v > 0}


def build_imbalanced_split(pool, labels, majority_label: int, majority_fraction: float,
                           count: int, seed: int) -> ClientDataset:
    """Draw a client dataset dominated by one label from a labelled column pool."""
    pool = np.asarray(pool, dtype=float)
    labels = np.asarray(labels).astype(int)
    if pool.shape[1] != labels.size:
        raise ValueError(f"pool has {pool.shape[1]} columns but {labels.size} labels")
    wanted = imbalanced_counts(labels, majority_label, majority_fraction, count)
    deficits = {lab: n - int(np.sum(labels == lab)) for lab, n in wanted.items()}
    deficits = {lab: dn for lab, dn in deficits.items() if dn > 0}
    if deficits:
        raise ValueError(f"pool too small; missing samples per label: {deficits}")
    gen = rng_mod.stream(seed, rng_mod.SPLIT, majority_label)
    picked = []
    for lab in sorted(wanted):
        idx = np.flatnonzero(labels == lab)
        picked.append(np.sort(gen.choice(idx, size=wanted[lab], replace=False)))
    idx = np.concatenate(picked)
    idx = idx[gen.permutation(idx.size)]
    return ClientDataset(pool[:, idx], labels[idx], idx)
