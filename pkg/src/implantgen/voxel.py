"""Dense voxel grids and the geometry used to move between resolutions.

Arrays are indexed ``data[x, y, z]``.  Flattening in Fortran order gives the
x-fastest linear layout that NRRD payloads use, and "linear index" below
always means ``x + nx * (y + ny * z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

Kind = Literal["hu", "mask", "prob"]
Triple = tuple[int, int, int]

HU_MIN, HU_MAX = -32768, 32767


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D volume with per-axis spacing in millimetres.

    ``kind`` is one of ``"hu"`` (int16 intensities), ``"mask"`` (uint8 values
    in {0, 1}) or ``"prob"`` (float64 values in [0, 1]).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: Kind = "mask"

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {self.data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        data = self.data
        if self.kind == "mask":
            if data.dtype != np.uint8:
                if not np.isin(data, (0, 1)).all():
                    raise ValueError("mask values must be 0 or 1")
                data = data.astype(np.uint8)
            elif data.max() > 1:
                raise ValueError("mask values must be 0 or 1")
        elif self.kind == "prob":
            data = np.asarray(data, dtype=np.float64)
            if not (np.isfinite(data).all() and data.min() >= 0.0 and data.max() <= 1.0):
                raise ValueError("probability values must lie in [0, 1]")
        elif self.kind == "hu":
            if data.dtype != np.int16:
                if data.min() < HU_MIN or data.max() > HU_MAX:
                    raise ValueError("HU values exceed the signed 16-bit range")
                data = data.astype(np.int16)
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> Triple:
        return tuple(int(n) for n in self.data.shape)

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def with_data(self, data: np.ndarray, kind: Kind | None = None) -> VoxelGrid:
        return VoxelGrid(data, self.spacing, kind or self.kind)


def mask(data, spacing=(1.0, 1.0, 1.0)) -> VoxelGrid:
    return VoxelGrid(np.asarray(data).astype(np.uint8), spacing, "mask")


@dataclass(frozen=True)
class BBox:
    """Half-open integer box ``[lo, hi)`` per axis."""

    lo: Triple
    hi: Triple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} -> {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> Triple:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def volume(self) -> int:
        return int(np.prod(self.shape))

    def inside(self, dims) -> bool:
        return all(0 <= a and b <= n for a, b, n in zip(self.lo, self.hi, dims))

    @classmethod
    def whole(cls, dims) -> BBox:
        return cls((0, 0, 0), tuple(dims))

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Placement:
    """Where a cropped block sits inside a padded canvas, and where it came from."""

    offset: Triple
    source_bbox: BBox
    source_dims: Triple
    canvas_dims: Triple

    def __post_init__(self):
        for o, s, c in zip(self.offset, self.source_bbox.shape, self.canvas_dims):
            if o < 0 or o + s > c:
                raise ValueError(f"block {self.source_bbox.shape} at {self.offset} "
                                 f"does not fit canvas {self.canvas_dims}")
        if not self.source_bbox.inside(self.source_dims):
            raise ValueError("source box lies outside the source grid")


def _require(grid: VoxelGrid, kind: Kind, op: str):
    if grid.kind != kind:
        raise ValueError(f"{op} expects a {kind!r} grid, got {grid.kind!r}")


def threshold(grid: VoxelGrid, lo: int = 150) -> VoxelGrid:
    """Mask of voxels with intensity >= ``lo`` (150 HU picks out bone)."""
    _require(grid, "hu", "threshold")
    return grid.with_data((grid.data >= lo).astype(np.uint8), "mask")


def binarize(grid: VoxelGrid, t: float = 0.5) -> VoxelGrid:
    _require(grid, "prob", "binarize")
    return grid.with_data((grid.data >= t).astype(np.uint8), "mask")


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


@dataclass(frozen=True)
class Component:
    label: int
    size: int
    first_index: int  # smallest linear (x-fastest) index in the component


def connected_components_3d(grid: VoxelGrid, connectivity: int = 26
                            ) -> tuple[np.ndarray, list[Component]]:
    """Label foreground components.

    Returns a label volume and the component list.  Labels run 1..K ordered by
    decreasing size, ties broken by the smallest linear index; 0 is background.
    """
    _require(grid, "mask", "connected_components_3d")
    raw, n = ndimage.label(grid.data, structure=_structure(connectivity))
    if n == 0:
        return np.zeros(grid.dims, dtype=np.int32), []
    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    fg = np.flatnonzero(flat)
    first = np.full(n, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[fg] - 1, fg)
    order = np.lexsort((first, -sizes))
    relabel = np.zeros(n + 1, dtype=np.int32)
    relabel[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    comps = [Component(i + 1, int(sizes[j]), int(first[j])) for i, j in enumerate(order)]
    return relabel[raw], comps


def largest_component(grid: VoxelGrid, connectivity: int = 26) -> VoxelGrid:
    """Keep only the largest connected body (used to drop the CT table)."""
    labels, comps = connected_components_3d(grid, connectivity)
    if not comps:
        raise ValueError("largest_component of an empty mask")
    return grid.with_data((labels == 1).astype(np.uint8))


def _check_target(target_dims) -> Triple:
    target = tuple(int(m) for m in target_dims)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be three positive integers, got {target_dims}")
    return target


def _rescaled_spacing(grid: VoxelGrid, target: Triple) -> tuple[float, float, float]:
    return tuple(s * n / m for s, n, m in zip(grid.spacing, grid.dims, target))


def nearest_indices(n: int, m: int) -> np.ndarray:
    """Source index of each of ``m`` output samples on an ``n``-long axis."""
    return np.minimum(((np.arange(m) + 0.5) * n / m).astype(np.int64), n - 1)


def downsample(grid: VoxelGrid, target_dims) -> VoxelGrid:
    """Nearest-neighbour resampling onto a coarser lattice.

    Voxel centres are mapped with ``floor((i + 0.5) * n / m)`` so masks stay
    binary and the physical extent is preserved.
    """
    target = _check_target(target_dims)
    if any(m > n for m, n in zip(target, grid.dims)):
        raise ValueError(f"downsample target {target} exceeds grid dims {grid.dims}")
    ix = np.ix_(*(nearest_indices(n, m) for n, m in zip(grid.dims, target)))
    return VoxelGrid(grid.data[ix], _rescaled_spacing(grid, target), grid.kind)


def upsample_spline2(grid: VoxelGrid, target_dims) -> VoxelGrid:
    """Quadratic-spline interpolation of a mask or probability field.

    Output sample ``i`` reads the source at ``(i + 0.5) * n / m - 0.5`` with
    mirror boundaries, then values are clamped to [0, 1].
    """
    target = _check_target(target_dims)
    if any(m < n for m, n in zip(target, grid.dims)):
        raise ValueError(f"upsample target {target} is smaller than grid dims {grid.dims}")
    if grid.kind == "hu":
        raise ValueError("upsample_spline2 expects a mask or probability grid")
    src = grid.data.astype(np.float64)
    out = src
    # Separable: one axis at a time keeps memory at O(output) instead of
    # building a full coordinate array.
    for axis, (n, m) in enumerate(zip(grid.dims, target)):
        if n == m:
            continue
        coords = (np.arange(m) + 0.5) * n / m - 0.5
        out = ndimage.spline_filter1d(out, order=2, axis=axis, mode="mirror")
        out = _sample_axis(out, coords, axis)
    # The prefilter leaves constants off by a few ulp, enough to push a flat
    # 0.5 below an inclusive 0.5 threshold.
    out = np.round(out, 12)
    return VoxelGrid(np.clip(out, 0.0, 1.0), _rescaled_spacing(grid, target), "prob")


def _sample_axis(coeffs: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Evaluate prefiltered quadratic-spline coefficients at ``coords`` along one axis."""
    moved = np.moveaxis(coeffs, axis, 0)
    n = moved.shape[0]
    base = np.floor(coords + 0.5).astype(np.int64)
    out = np.zeros((len(coords),) + moved.shape[1:])
    for shift in (-1, 0, 1):
        j = base + shift
        w = _bspline2(coords - j)
        out += w.reshape((-1,) + (1,) * (moved.ndim - 1)) * moved[_mirror(j, n)]
    return np.moveaxis(out, 0, axis)


def _bspline2(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    return np.where(a < 0.5, 0.75 - a * a, np.where(a < 1.5, 0.5 * (1.5 - a) ** 2, 0.0))


def _mirror(j: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(j)
    period = 2 * (n - 1)
    j = np.mod(j, period)
    return np.where(j >= n, period - j, j)


def bbox_xy(grid: VoxelGrid, z_extent: int, z_policy: str = "centroid") -> BBox:
    """Tight x/y box of the z-projection plus a fixed-length z window.

    The z window has length ``min(z_extent, nz)``.  With ``z_policy="centroid"``
    it is centred on the foreground z-centroid and shifted to stay in range;
    ``"center"`` centres it on the tight z extent instead.
    """
    _require(grid, "mask", "bbox_xy")
    if z_extent < 1:
        raise ValueError("z_extent must be positive")
    fg = grid.data.astype(bool)
    proj = fg.any(axis=2)
    if not proj.any():
        raise ValueError("no defect detected: empty mask")
    xs = np.flatnonzero(proj.any(axis=1))
    ys = np.flatnonzero(proj.any(axis=0))
    nz = grid.dims[2]
    length = min(z_extent, nz)
    zcount = fg.sum(axis=(0, 1))
    if z_policy == "centroid":
        centre = float(np.dot(np.arange(nz), zcount) / zcount.sum()) + 0.5
    elif z_policy == "center":
        zs = np.flatnonzero(zcount)
        centre = (zs[0] + zs[-1] + 1) / 2.0
    else:
        raise ValueError(f"unknown z_policy {z_policy!r}")
    z0 = int(np.floor(centre - length / 2.0 + 0.5))
    z0 = min(max(z0, 0), nz - length)
    return BBox((xs[0], ys[0], z0), (xs[-1] + 1, ys[-1] + 1, z0 + length))


def expand_margin(b: BBox, m: int, host_dims) -> BBox:
    """Widen the x/y bounds by ``m`` on each side, clamped to the host grid."""
    if m < 0:
        raise ValueError("margin must be non-negative")
    nx, ny, _ = host_dims
    return BBox(
        (max(b.lo[0] - m, 0), max(b.lo[1] - m, 0), b.lo[2]),
        (min(b.hi[0] + m, nx), min(b.hi[1] + m, ny), b.hi[2]),
    )


def crop(grid: VoxelGrid, b: BBox) -> VoxelGrid:
    if not b.inside(grid.dims):
        raise ValueError(f"box {b.lo}->{b.hi} outside grid dims {grid.dims}")
    return grid.with_data(grid.data[b.slices].copy())


def zero_pad_center(grid: VoxelGrid, canvas_dims, source_bbox: BBox | None = None,
                    source_dims=None) -> tuple[VoxelGrid, Placement]:
    """Put ``grid`` in the middle of an all-zero canvas.

    ``source_bbox``/``source_dims`` say where the block was cropped from; they
    default to the block itself so a bare pad can still be undone.
    """
    canvas = tuple(int(c) for c in canvas_dims)
    dims = grid.dims
    if any(d > c for d, c in zip(dims, canvas)):
        raise ValueError(f"grid {dims} larger than canvas {canvas}")
    offset = tuple((c - d) // 2 for c, d in zip(canvas, dims))
    out = np.zeros(canvas, dtype=grid.data.dtype)
    out[tuple(slice(o, o + d) for o, d in zip(offset, dims))] = grid.data
    if source_bbox is None:
        source_bbox = BBox.whole(dims)
        source_dims = dims
    if tuple(source_bbox.shape) != dims:
        raise ValueError("source box shape does not match the block")
    placement = Placement(offset, source_bbox, tuple(source_dims), canvas)
    return grid.with_data(out), placement


def restore(pred: VoxelGrid, p: Placement) -> VoxelGrid:
    """Undo padding and cropping: return a grid with the original dims."""
    if pred.dims != p.canvas_dims:
        raise ValueError(f"prediction dims {pred.dims} differ from canvas {p.canvas_dims}")
    block = pred.data[tuple(slice(o, o + s) for o, s in zip(p.offset, p.source_bbox.shape))]
    out = np.zeros(p.source_dims, dtype=pred.data.dtype)
    out[p.source_bbox.slices] = block
    return pred.with_data(out)
