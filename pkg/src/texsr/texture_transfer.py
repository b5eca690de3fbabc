"""Feature swapping: dense patch matching and texture transfer.

The input image's texture features are replaced patch-by-patch with the
best-matching features of a high-resolution reference. Matching runs
between the input features and the features of the *blurred* reference
(downsampled and re-upsampled), comparing like with like; the
transferred patches then come from the crisp reference features at the
matched indices.

Several reference images may be pooled: their patches form one search
set in image order, so ties resolve to (earliest image, lowest patch
index).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .image_core import (
    PatchGrid,
    assemble_patches,
    degrade,
    extract_patches,
    save_tensor,
)
from .scattering import ScatterConfig, cached_filter_bank, scatter

ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class MatchMap:
    """Best reference patch per input patch.

    indices[i] is the reference pool index of maximal similarity for
    input patch i; scores[i] the similarity value; grid the input
    feature map's patch lattice (row-major patch order).
    """

    indices: np.ndarray
    scores: np.ndarray
    grid: PatchGrid


def similarity(p_in: np.ndarray, p_ref: np.ndarray, normalized: bool = True) -> float:
    """Inner product of two patches, by default after L2 normalization.

    Normalized similarity lies in [-1, 1]; a patch with norm below
    1e-12 scores 0 against everything.
    """
    a = np.asarray(p_in, dtype=np.float64).ravel()
    b = np.asarray(p_ref, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"patch sizes differ: {a.size} vs {b.size}")
    if not normalized:
        return float(np.dot(a, b))
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.dot(a / na, b / nb))


def _flatten_patches(patches: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(
        patches.reshape(patches.shape[0], -1), dtype=np.float64
    )


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    safe = norms >= ZERO_NORM_EPS
    out = np.zeros_like(mat)
    out[safe] = mat[safe] / norms[safe, None]
    return out


def match_patch_pools(in_patches: np.ndarray, ref_patches: np.ndarray,
                      grid: PatchGrid, normalized: bool = True,
                      block: int = 512) -> MatchMap:
    """Exhaustive argmax matching between flattened patch pools.

    Ties break to the lowest reference index. Scores are recomputed
    pairwise after the argmax so they equal similarity(i, indices[i])
    exactly.
    """
    a = _flatten_patches(in_patches)
    b = _flatten_patches(ref_patches)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"patch element counts differ: {a.shape[1]} vs {b.shape[1]}")
    if b.shape[0] == 0:
        raise ShapeError("reference pool is empty")
    an = _normalize_rows(a) if normalized else a
    bn = _normalize_rows(b) if normalized else b
    indices = np.empty(a.shape[0], dtype=np.int64)
    for lo in range(0, a.shape[0], block):
        hi = min(lo + block, a.shape[0])
        sims = an[lo:hi] @ bn.T
        indices[lo:hi] = np.argmax(sims, axis=1)
    scores = np.array([
        similarity(in_patches[i], ref_patches[indices[i]], normalized=normalized)
        for i in range(a.shape[0])
    ])
    return MatchMap(indices=indices, scores=scores, grid=grid)


def dense_match(f_in: np.ndarray, f_ref_blur: np.ndarray,
                grid: PatchGrid | None = None,
                normalized: bool = True) -> MatchMap:
    """Match every input feature patch against every reference patch."""
    f_in = np.asarray(f_in)
    f_ref_blur = np.asarray(f_ref_blur)
    if f_in.shape[0] != f_ref_blur.shape[0]:
        raise ShapeError(
            f"channel counts differ: {f_in.shape[0]} vs {f_ref_blur.shape[0]}"
        )
    if grid is None:
        grid = PatchGrid.for_shape(f_in.shape[1], f_in.shape[2])
    ref_grid = PatchGrid.for_shape(f_ref_blur.shape[1], f_ref_blur.shape[2],
                                   grid.patch_size, grid.stride)
    return match_patch_pools(
        extract_patches(f_in, grid), extract_patches(f_ref_blur, ref_grid),
        grid, normalized=normalized,
    )


def transfer(f_ref_hr: np.ndarray, match: MatchMap,
             out_dims: tuple[int, int, int]) -> np.ndarray:
    """Assemble the matched high-resolution reference patches.

    f_ref_hr must be spatially aligned with the blurred reference the
    match was computed on (same dims). Overlaps are averaged.
    """
    f_ref_hr = np.asarray(f_ref_hr)
    grid = match.grid
    ref_grid = PatchGrid.for_shape(f_ref_hr.shape[1], f_ref_hr.shape[2],
                                   grid.patch_size, grid.stride)
    pool = extract_patches(f_ref_hr, ref_grid)
    return transfer_from_pool(pool, match, out_dims)


def transfer_from_pool(hr_patch_pool: np.ndarray, match: MatchMap,
                       out_dims: tuple[int, int, int]) -> np.ndarray:
    """transfer() against an explicit (possibly multi-image) patch pool."""
    indices = match.indices
    if indices.min() < 0 or indices.max() >= hr_patch_pool.shape[0]:
        raise ShapeError(
            f"match index out of range for pool of {hr_patch_pool.shape[0]}"
        )
    if out_dims[0] != hr_patch_pool.shape[1]:
        raise ShapeError(
            f"output channels {out_dims[0]} != pool channels {hr_patch_pool.shape[1]}"
        )
    return assemble_patches(hr_patch_pool[indices], match.grid, out_dims)


@dataclass(frozen=True)
class ReferencePool:
    """Precomputed reference patch pools, reusable across many inputs."""

    blur_patches: np.ndarray   # (N, C, k, k) features of degraded references
    hr_patches: np.ndarray     # (N, C, k, k) features of crisp references
    config: ScatterConfig
    factor: int
    patch_size: int = 3
    stride: int = 1


def build_reference_pool(refs: Sequence[np.ndarray], cfg: ScatterConfig,
                         factor: int, patch_size: int = 3,
                         stride: int = 1) -> ReferencePool:
    """Scatter each reference twice (crisp and degraded) and pool patches."""
    refs = list(refs)
    if not refs:
        raise ShapeError("texture transfer requires >= 1 reference image")
    blur_pools = []
    hr_pools = []
    for ref in refs:
        ref = np.asarray(ref, dtype=np.float64)
        bank = cached_filter_bank(cfg, ref.shape)
        f_hr = scatter(ref, cfg, bank)
        f_blur = scatter(degrade(ref, factor)[1], cfg, bank)
        grid = PatchGrid.for_shape(ref.shape[0], ref.shape[1], patch_size, stride)
        hr_pools.append(extract_patches(f_hr, grid))
        blur_pools.append(extract_patches(f_blur, grid))
    return ReferencePool(
        blur_patches=np.concatenate(blur_pools, axis=0),
        hr_patches=np.concatenate(hr_pools, axis=0),
        config=cfg, factor=factor, patch_size=patch_size, stride=stride,
    )


def swap_with_pool(i_lr_up: np.ndarray, pool: ReferencePool,
                   normalized: bool = True,
                   return_match: bool = False):
    """Swapped feature map for an upsampled input against a prebuilt pool."""
    i_lr_up = np.asarray(i_lr_up, dtype=np.float64)
    f_in = scatter(i_lr_up, pool.config)
    grid = PatchGrid.for_shape(f_in.shape[1], f_in.shape[2],
                               pool.patch_size, pool.stride)
    match = match_patch_pools(extract_patches(f_in, grid), pool.blur_patches,
                              grid, normalized=normalized)
    swapped = transfer_from_pool(pool.hr_patches, match, f_in.shape)
    return (swapped, match) if return_match else swapped


def swap_features(i_lr_up: np.ndarray, i_ref, cfg: ScatterConfig,
                  factor: int, normalized: bool = True) -> np.ndarray:
    """Full feature swap: scatter, dense-match, transfer.

    i_ref may be one reference image or a sequence of them (pooled
    jointly). The result has the dims of scatter(i_lr_up).
    """
    refs = [i_ref] if isinstance(i_ref, np.ndarray) else list(i_ref)
    pool = build_reference_pool(refs, cfg, factor)
    return swap_with_pool(i_lr_up, pool, normalized=normalized)


def save_match_map(match: MatchMap, path) -> None:
    """Serialize a MatchMap as two planes (indices, scores) on the grid."""
    g = match.grid
    planes = np.stack([
        match.indices.reshape(g.origin_rows, g.origin_cols).astype(np.float64),
        match.scores.reshape(g.origin_rows, g.origin_cols),
    ])
    save_tensor(planes, path)


def match_visualization(match: MatchMap, ref_pool_size: int) -> np.ndarray:
    """Grayscale map of matched reference indices, normalized to [0, 1].

    Nearby input patches that match nearby reference patches produce
    smooth ramps; speckle indicates scattered matches.
    """
    g = match.grid
    denom = max(ref_pool_size - 1, 1)
    return match.indices.reshape(g.origin_rows, g.origin_cols) / denom
