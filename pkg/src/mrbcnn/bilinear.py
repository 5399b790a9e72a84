"""Bilinear feature combination and region-wise sum pooling.

Per location, two feature maps are combined into the flattened outer product
of their channel vectors; the result is then summed inside each cell of a
non-overlapping grid, giving one row per region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, concat, reshape

PART_NAMES = ("top", "middle", "bottom")


def bilinear_outer(fa: Tensor, fb: Tensor) -> Tensor:
    """Per-location outer product ``vec(fa(l)^T fb(l))``.

    ``fa`` is ``M x H x W`` and ``fb`` is ``N x H x W`` (or both with a
    leading batch axis); the output has ``M*N`` channels, index ``m*N + n``.
    """
    fa, fb = as_tensor(fa), as_tensor(fb)
    if fa.ndim not in (3, 4) or fa.ndim != fb.ndim:
        raise DimensionError(f"bilinear_outer: ranks of {fa.shape} and {fb.shape} unsupported")
    if fa.shape[-2:] != fb.shape[-2:] or fa.shape[:-3] != fb.shape[:-3]:
        raise DimensionError(f"bilinear_outer: spatial/batch extents {fa.shape} vs {fb.shape} differ")
    a, b = fa.data, fb.data
    m, n = a.shape[-3], b.shape[-3]
    lead = a.shape[:-3]
    h, w = a.shape[-2:]
    out = (a[..., :, None, :, :] * b[..., None, :, :, :]).reshape(*lead, m * n, h, w)

    def back(g):
        g4 = g.reshape(*lead, m, n, h, w)
        ga = np.einsum("...mnhw,...nhw->...mhw", g4, b)
        gb = np.einsum("...mnhw,...mhw->...nhw", g4, a)
        return ga, gb

    return Tensor._from_op(out, (fa, fb), back, "bilinear_outer")


@dataclass(frozen=True)
class RegionGrid:
    """Row-major partition of an ``H x W`` map into rectangular cells."""

    feature_h: int
    feature_w: int
    cell_h: int
    cell_w: int

    @property
    def row_bands(self) -> list[tuple[int, int]]:
        return [(r, min(r + self.cell_h, self.feature_h)) for r in range(0, self.feature_h, self.cell_h)]

    @property
    def col_bands(self) -> list[tuple[int, int]]:
        return [(c, min(c + self.cell_w, self.feature_w)) for c in range(0, self.feature_w, self.cell_w)]

    @property
    def shape(self) -> tuple[int, int]:
        return math.ceil(self.feature_h / self.cell_h), math.ceil(self.feature_w / self.cell_w)

    @property
    def n_regions(self) -> int:
        rows, cols = self.shape
        return rows * cols

    @property
    def regions(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [(rb, cb) for rb in self.row_bands for cb in self.col_bands]


def make_region_grid(h: int, w: int, cell_h: int, cell_w: int) -> RegionGrid:
    """Ceil-partition of ``h x w``; only the last row/column band may be smaller."""
    if h < 1 or w < 1:
        raise DimensionError(f"feature map extent must be positive, got {h}x{w}")
    if not (1 <= cell_h <= h and 1 <= cell_w <= w):
        raise DimensionError(f"cell {cell_h}x{cell_w} must lie within 1..{h} x 1..{w}")
    return RegionGrid(int(h), int(w), int(cell_h), int(cell_w))


def grid_from_counts(h: int, w: int, rows: int, cols: int) -> RegionGrid:
    """Grid with roughly ``rows x cols`` cells, cell size derived by ceiling division."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"grid counts must be positive, got {rows}x{cols}")
    return make_region_grid(h, w, math.ceil(h / min(rows, h)), math.ceil(w / min(cols, w)))


@dataclass(frozen=True)
class BilinearDescriptor:
    """Region-pooled bilinear features of one image part: ``R x (M*N)``."""

    part: str
    matrix: Tensor

    @property
    def n_regions(self) -> int:
        return self.matrix.shape[-2]

    @property
    def dim(self) -> int:
        return self.matrix.shape[-1]


def region_pool(bmap: Tensor, grid: RegionGrid, part: str = "whole") -> BilinearDescriptor:
    """Sum the bilinear map over each grid cell; rows follow row-major region order."""
    bmap = as_tensor(bmap)
    if bmap.ndim not in (3, 4):
        raise DimensionError(f"region_pool expects D x H x W (optionally batched), got {bmap.shape}")
    h, w = bmap.shape[-2:]
    if (h, w) != (grid.feature_h, grid.feature_w):
        raise DimensionError(f"grid is {grid.feature_h}x{grid.feature_w} but map is {h}x{w}")
    rstart = [r0 for r0, _ in grid.row_bands]
    cstart = [c0 for c0, _ in grid.col_bands]
    rsize = [r1 - r0 for r0, r1 in grid.row_bands]
    csize = [c1 - c0 for c0, c1 in grid.col_bands]
    nr, nc = len(rstart), len(cstart)
    x = bmap.data
    pooled = np.add.reduceat(np.add.reduceat(x, rstart, axis=-2), cstart, axis=-1)
    lead = x.shape[:-3]
    d = x.shape[-3]
    # [..., D, nr, nc] -> [..., nr*nc, D]
    out = np.moveaxis(pooled, -3, -1).reshape(*lead, nr * nc, d)

    def back(g):
        gg = np.moveaxis(g.reshape(*lead, nr, nc, d), -1, -3)
        gg = np.repeat(np.repeat(gg, rsize, axis=-2), csize, axis=-1)
        return (gg,)

    return BilinearDescriptor(part, Tensor._from_op(out, (bmap,), back, "region_pool"))


def signed_sqrt_l2(desc: BilinearDescriptor, eps: float = 1e-12) -> BilinearDescriptor:
    """Per-region signed square root followed by L2 normalisation of each row."""
    x = desc.matrix.data
    root = np.sqrt(np.abs(x) + eps)
    y = np.sign(x) * (root - np.sqrt(eps))
    norm = np.sqrt(np.sum(y * y, axis=-1, keepdims=True) + eps)
    z = y / norm

    def back(g):
        gy = (g - z * np.sum(g * z, axis=-1, keepdims=True)) / norm
        return (gy * 0.5 / root,)

    return BilinearDescriptor(desc.part, Tensor._from_op(z, (desc.matrix,), back, "signed_sqrt_l2"))


def assemble_descriptor(parts: list[BilinearDescriptor]) -> Tensor:
    """Flatten and concatenate three part descriptors in the order given.

    Callers pass them as (top, middle, bottom); within a part the layout is
    region-major, then outer-product index.
    """
    if len(parts) != 3:
        raise ContractError(f"expected 3 part descriptors, got {len(parts)}")
    names = [p.part for p in parts]
    if len(set(names)) != 3:
        raise ContractError(f"part ids must be distinct, got {names}")
    ref = parts[0].matrix.shape
    for p in parts[1:]:
        if p.matrix.shape != ref:
            raise ContractError(f"part descriptor shapes differ: {ref} vs {p.matrix.shape}")
    if len(ref) == 2:
        flat = [reshape(p.matrix, (ref[0] * ref[1],)) for p in parts]
        return concat(flat, axis=0)
    if len(ref) == 3:
        flat = [reshape(p.matrix, (ref[0], ref[1] * ref[2])) for p in parts]
        return concat(flat, axis=1)
    raise DimensionError(f"part descriptor must be R x D or B x R x D, got {ref}")
