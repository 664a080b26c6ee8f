"""Point-cloud types, normalization, masking, Chamfer distances, and PCB1 file IO."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateCloudError,
    EmptyCloudError,
    EmptyRegionError,
    FormatError,
    LengthMismatchError,
)

PCB1_MAGIC = b"PCB1"
_FLAG_LABELS = 1
_FLAG_MASK = 2


@dataclass
class PointCloud:
    """K x 3 coordinates plus optional per-point part labels (small ints)."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise LengthMismatchError(f"points must be (K, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise EmptyCloudError("cloud must contain at least one point")
        if not np.isfinite(self.points).all():
            raise DegenerateCloudError("non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (self.points.shape[0],):
                raise LengthMismatchError("labels length must equal K")

    @property
    def k(self) -> int:
        return self.points.shape[0]

    def copy(self) -> "PointCloud":
        labels = None if self.labels is None else self.labels.copy()
        return PointCloud(self.points.copy(), labels)


@dataclass
class ConditionedCloud:
    """Masked conditioning input: zeroed coords plus (1,1,1) flag channels on masked points."""

    coords: np.ndarray
    flags: np.ndarray


def check_mask(mask: np.ndarray, k: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (k,):
        raise LengthMismatchError(f"mask length {mask.shape} does not match K={k}")
    return mask


def normalize(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point to unit norm."""
    pts = cloud.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt((centered**2).sum(axis=1)).max())
    if scale <= 0.0 or not np.isfinite(scale):
        raise DegenerateCloudError("all points identical; scale undefined")
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(centered / scale, labels)


def normalize_transform(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid and scale that normalize(points) would apply."""
    centroid = points.mean(axis=0)
    scale = float(np.sqrt(((points - centroid) ** 2).sum(axis=1)).max())
    if scale <= 0.0 or not np.isfinite(scale):
        raise DegenerateCloudError("all points identical; scale undefined")
    return centroid, scale


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exhaustive (K_a, K_b) matrix; same op order as the scalar loop
    diff = a[:, None, :] - b[None, :, :]
    return (diff**2).sum(axis=2)


def chamfer(a: PointCloud | np.ndarray, b: PointCloud | np.ndarray) -> float:
    """Sum of the two directional means of squared nearest-neighbor distances."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if pa.size == 0 or pb.size == 0:
        raise EmptyCloudError("chamfer requires nonempty clouds")
    d = _sq_dists(pa, pb)
    forward = float(d.min(axis=1).mean())
    backward = float(d.min(axis=0).mean())
    return forward + backward


def masked_chamfer(
    a: PointCloud,
    b: PointCloud,
    mask_a: np.ndarray,
    mask_b: np.ndarray,
) -> float:
    """Chamfer restricted to the unmasked subsets of both clouds."""
    ma = check_mask(mask_a, a.k)
    mb = check_mask(mask_b, b.k)
    keep_a = a.points[~ma]
    keep_b = b.points[~mb]
    if keep_a.shape[0] == 0 or keep_b.shape[0] == 0:
        raise EmptyRegionError("an unmasked subset is empty")
    return chamfer(keep_a, keep_b)


def apply_mask(cloud: PointCloud, mask: np.ndarray) -> ConditionedCloud:
    """Zero the masked coordinates and raise (1,1,1) flags on them."""
    m = check_mask(mask, cloud.k)
    coords = cloud.points.copy()
    coords[m] = 0.0
    flags = np.zeros_like(coords)
    flags[m] = 1.0
    return ConditionedCloud(coords, flags)


def save_pcb1(
    path: str | Path,
    cloud: PointCloud,
    mask: np.ndarray | None = None,
) -> None:
    """Write a PCB1 file: magic, u32 K, u8 d, u8 flags, f32 coords, labels, mask."""
    pts32 = cloud.points.astype("<f4")
    k, d = pts32.shape
    flags = 0
    if cloud.labels is not None:
        flags |= _FLAG_LABELS
    if mask is not None:
        mask = check_mask(mask, k)
        flags |= _FLAG_MASK
    blob = bytearray()
    blob += PCB1_MAGIC
    blob += struct.pack("<IBB", k, d, flags)
    blob += pts32.tobytes(order="C")
    if cloud.labels is not None:
        blob += cloud.labels.astype(np.uint8).tobytes()
    if mask is not None:
        blob += mask.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_pcb1(path: str | Path) -> tuple[PointCloud, np.ndarray | None]:
    """Read a PCB1 file. Returns (cloud, mask-or-None). Rejects unknown magic/flags."""
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != PCB1_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    k, d, flags = struct.unpack_from("<IBB", raw, 4)
    if flags & ~(_FLAG_LABELS | _FLAG_MASK):
        raise FormatError(f"{path}: unknown flag bits 0x{flags:02x}")
    if k < 1:
        raise FormatError(f"{path}: empty cloud")
    off = 10
    need = k * d * 4
    if len(raw) < off + need:
        raise FormatError(f"{path}: truncated coordinates")
    pts = np.frombuffer(raw, dtype="<f4", count=k * d, offset=off).reshape(k, d)
    off += need
    labels = None
    if flags & _FLAG_LABELS:
        if len(raw) < off + k:
            raise FormatError(f"{path}: truncated labels")
        labels = np.frombuffer(raw, dtype=np.uint8, count=k, offset=off).copy()
        off += k
    mask = None
    if flags & _FLAG_MASK:
        if len(raw) < off + k:
            raise FormatError(f"{path}: truncated mask")
        mask = np.frombuffer(raw, dtype=np.uint8, count=k, offset=off).astype(bool)
        off += k
    if len(raw) != off:
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    if d != 3:
        raise FormatError(f"{path}: unsupported dimension d={d}")
    return PointCloud(pts.astype(np.float64), labels), mask
