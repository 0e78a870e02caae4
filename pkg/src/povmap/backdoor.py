"""Attention-guided patch adjustment for the economic training stage.

Patches whose attention score (from the morphological encoder) falls in
the bottom quantile are treated as non-causal and replaced by the
pixel-wise mean of their 8-neighborhood causal patches; a non-causal patch
with no causal neighbor receives the mean of all causal patches.  Means
are accumulated in ascending patch-index order so results are bit-stable.

The quantile rule is the default; a fixed-threshold rule (score < tau is
non-causal) is available behind ``partition_patches_threshold``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, encode_patches, patchify
from .errors import DomainError

DEFAULT_QUANTILE = 0.30

__all__ = [
    "PatchPartition",
    "partition_patches",
    "partition_patches_threshold",
    "adjust_image",
    "adjust_patch_matrix",
    "adjust_dataset",
    "DEFAULT_QUANTILE",
]


@dataclass(frozen=True)
class PatchPartition:
    """Causal mask over the g x g patch grid (True = causal)."""

    causal: np.ndarray
    quantile: float

    @property
    def grid(self) -> int:
        return self.causal.shape[0]

    @property
    def n_non_causal(self) -> int:
        return int((~self.causal).sum())


def partition_patches(attention: np.ndarray, quantile: float = DEFAULT_QUANTILE) -> PatchPartition:
    """Mark the lowest ceil(q * g^2) attention scores non-causal.

    Ties are broken by patch index ascending: among equal scores the lower
    index is marked non-causal first.
    """
    a = np.asarray(attention, dtype=np.float64).ravel()
    g = math.isqrt(a.size)
    if g * g != a.size:
        raise DomainError(f"attention map size {a.size} is not a square grid")
    if not (0.0 <= quantile < 1.0):
        raise DomainError(f"quantile must be in [0, 1), got {quantile}")
    k = math.ceil(quantile * a.size)
    causal = np.ones(a.size, dtype=bool)
    if k > 0:
        order = np.argsort(a, kind="stable")
        causal[order[:k]] = False
    return PatchPartition(causal.reshape(g, g), quantile)


def partition_patches_threshold(attention: np.ndarray, tau: float) -> PatchPartition:
    """Fixed-threshold rule: scores strictly below tau are non-causal."""
    a = np.asarray(attention, dtype=np.float64).ravel()
    g = math.isqrt(a.size)
    if g * g != a.size:
        raise DomainError(f"attention map size {a.size} is not a square grid")
    causal = a >= tau
    if not causal.any():
        # Keep the single best patch causal so adjustment stays defined.
        causal[int(np.argmax(a))] = True
    return PatchPartition(causal.reshape(g, g), float("nan"))


def _neighbor_indices(i: int, j: int, g: int):
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            ni, nj = i + di, j + dj
            if 0 <= ni < g and 0 <= nj < g:
                yield ni, nj


def adjust_patch_matrix(patches: np.ndarray, partition: PatchPartition) -> np.ndarray:
    """Apply the adjustment on a (n_patches, patch_dim) matrix."""
    g = partition.grid
    pm = np.asarray(patches)
    if pm.shape[0] != g * g:
        raise DomainError(f"patch count {pm.shape[0]} does not match grid {g}x{g}")
    causal = partition.causal
    out = pm.copy()

    global_mean = None
    for i in range(g):
        for j in range(g):
            if causal[i, j]:
                continue
            neigh = [ni * g + nj for ni, nj in _neighbor_indices(i, j, g) if causal[ni, nj]]
            if neigh:
                acc = pm[neigh[0]].copy()
                for idx in neigh[1:]:
                    acc += pm[idx]
                out[i * g + j] = acc / len(neigh)
            else:
                if global_mean is None:
                    flat = np.flatnonzero(causal.ravel())
                    acc = pm[flat[0]].copy()
                    for idx in flat[1:]:
                        acc += pm[idx]
                    global_mean = acc / len(flat)
                out[i * g + j] = global_mean
    return out


def adjust_image(pixels: np.ndarray, partition: PatchPartition) -> np.ndarray:
    """Adjustment on (256, 256, 3) pixels; causal patches are untouched."""
    px = np.asarray(pixels, dtype=np.float64)
    g = partition.grid
    if not partition.causal.any():
        return px.copy()
    patch_px = px.shape[0] // g
    pm = patchify(px, patch_px)
    adj = adjust_patch_matrix(pm, partition)
    out = (
        adj.reshape(g, g, patch_px, patch_px, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(px.shape)
    )
    return out


def compute_partitions(
    tiles_patches: np.ndarray, morph_params: EncoderParams, quantile: float
) -> list[PatchPartition]:
    """Partitions for a stack of patch matrices via the frozen morph encoder."""
    parts = []
    batch = 64
    for lo in range(0, tiles_patches.shape[0], batch):
        _, amaps, _ = encode_patches(morph_params, tiles_patches[lo : lo + batch])
        for a in np.atleast_2d(amaps):
            parts.append(partition_patches(a, quantile))
    return parts


def adjust_dataset(
    pixel_stack: np.ndarray,
    morph_params: EncoderParams,
    quantile: float = DEFAULT_QUANTILE,
    out_png_dir: str | os.PathLike | None = None,
    tile_ids: list[str] | None = None,
) -> np.ndarray:
    """Adjusted copies of a stack of images using a frozen morph encoder.

    ``pixel_stack`` is (N, 256, 256, 3) floats in [0,1].  Optionally dumps
    the adjusted tiles as PNGs for inspection.
    """
    px = np.asarray(pixel_stack, dtype=np.float64)
    patch_px = morph_params.config.patch_px
    pm = patchify(px, patch_px)
    parts = compute_partitions(pm, morph_params, quantile)
    out = np.empty_like(px)
    for i in range(px.shape[0]):
        out[i] = adjust_image(px[i], parts[i])
    if out_png_dir is not None:
        from PIL import Image

        os.makedirs(out_png_dir, exist_ok=True)
        for i in range(out.shape[0]):
            name = tile_ids[i] if tile_ids else f"tile_{i:05d}"
            arr = np.rint(np.clip(out[i], 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(os.path.join(os.fspath(out_png_dir), f"{name}.png"))
    return out
