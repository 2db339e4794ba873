"""Forward rasterization and image/mask point-set extraction.

Rasterization is forward-only in the geometry; the texture gradient path is a
sparse operator of bilinear texel weights recorded per foreground pixel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import sparse

from latent_meshfit.camera import CameraPose, project_weak_perspective
from latent_meshfit.tensorcore import Rng, Tensor

logger = logging.getLogger(__name__)

MIN_RESOLUTION = 16
DEFAULT_RESOLUTION = 128
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
DEFAULT_N_SAMPLE = 8096
# Barycentric slack so pixel centres on shared edges are never dropped
INSIDE_TOL = 1e-10


class RenderError(Exception):
    """Rendering or point extraction error."""

    pass


@dataclass(frozen=True)
class TexelWeights:
    """Bilinear texture sampling weights of the foreground pixels.

    ``matrix`` is n_foreground x n_texels; row k belongs to flat pixel
    ``pixel_index[k]`` (raster order).
    """

    matrix: sparse.csr_matrix
    pixel_index: npt.NDArray[np.int64]
    texture_shape: tuple[int, int]
    resolution: int

    def colors(self, texture: Tensor) -> Tensor:
        """Foreground pixel colors sampled from texture (n_foreground x 3)."""
        return self.matrix @ texture.reshape(-1, 3)

    def compose(self, texture: Tensor, background: tuple[float, float, float]) -> Tensor:
        """Full R x R x 3 image with the given texture and background."""
        r = self.resolution
        image = np.empty((r * r, 3))
        image[:] = background
        image[self.pixel_index] = self.colors(texture)
        return image.reshape(r, r, 3)

    def backward(self, grad_image: Tensor) -> Tensor:
        """Gradient w.r.t. the texture given dL/d(image)."""
        grad_fg = grad_image.reshape(-1, 3)[self.pixel_index]
        h, w = self.texture_shape
        return np.asarray(self.matrix.T @ grad_fg).reshape(h, w, 3)

    def entries(self) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64], Tensor]:
        """(pixel, texel, weight) triples in pixel order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return self.pixel_index[coo.row[order]], coo.col[order], coo.data[order]


@dataclass(frozen=True)
class RenderOutput:
    """Rendered albedo image, coverage mask, depth and texel weights."""

    image: Tensor
    mask: npt.NDArray[np.bool_]
    depth: Tensor
    texel_weights: TexelWeights
    face_index: npt.NDArray[np.int64]

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class ColoredPointSet:
    """Points in normalized image coordinates with appearance vectors."""

    positions: Tensor  # N x 2
    attrs: Tensor  # N x d
    source: npt.NDArray[np.int64] | None = None  # flat pixel or cell index per point

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dim(self) -> int:
        return int(self.attrs.shape[1])


def pixel_centers(flat_index: npt.NDArray[np.int64], resolution: int) -> Tensor:
    """Normalized (x, y) of pixel centres: ((2c+1)/R - 1, 1 - (2r+1)/R)."""
    rows, cols = np.divmod(np.asarray(flat_index, dtype=np.int64), resolution)
    return np.stack(
        [(2 * cols + 1) / resolution - 1.0, 1.0 - (2 * rows + 1) / resolution], axis=1
    )


def rasterize(
    vertices: Tensor,
    faces: npt.NDArray[np.int64],
    uv: Tensor,
    texture: Tensor,
    pose: CameraPose,
    resolution: int = DEFAULT_RESOLUTION,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> RenderOutput:
    """Z-buffer rasterization with barycentric uv interpolation and bilinear texturing.

    A triangle covers a pixel when the pixel centre lies inside its projection;
    the nearest (smallest) interpolated depth wins and ties keep the earlier face.
    """
    if resolution < MIN_RESOLUTION:
        raise RenderError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise RenderError(f"texture must be H x W x 3, got {texture.shape}")
    r = resolution
    points, depth = project_weak_perspective(pose, vertices)
    px = (points[:, 0] + 1.0) * r / 2.0 - 0.5
    py = (1.0 - points[:, 1]) * r / 2.0 - 0.5

    zbuf = np.full((r, r), np.inf)
    face_map = np.full((r, r), -1, dtype=np.int64)
    bary = np.zeros((r, r, 3))
    for f, (a, b, c) in enumerate(np.asarray(faces, dtype=np.int64)):
        xa, xb, xc = px[a], px[b], px[c]
        ya, yb, yc = py[a], py[b], py[c]
        det = (xb - xa) * (yc - ya) - (xc - xa) * (yb - ya)
        if abs(det) < 1e-12:
            continue
        c0 = max(math.ceil(min(xa, xb, xc)), 0)
        c1 = min(math.floor(max(xa, xb, xc)), r - 1)
        r0 = max(math.ceil(min(ya, yb, yc)), 0)
        r1 = min(math.floor(max(ya, yb, yc)), r - 1)
        if c0 > c1 or r0 > r1:
            continue
        cc, rr = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        wb = ((cc - xa) * (yc - ya) - (xc - xa) * (rr - ya)) / det
        wc = ((xb - xa) * (rr - ya) - (cc - xa) * (yb - ya)) / det
        wa = 1.0 - wb - wc
        z = wa * depth[a] + wb * depth[b] + wc * depth[c]
        window = zbuf[r0 : r1 + 1, c0 : c1 + 1]
        hit = (wa >= -INSIDE_TOL) & (wb >= -INSIDE_TOL) & (wc >= -INSIDE_TOL) & (z < window)
        if not hit.any():
            continue
        window[hit] = z[hit]
        face_map[r0 : r1 + 1, c0 : c1 + 1][hit] = f
        bary[r0 : r1 + 1, c0 : c1 + 1][hit] = np.stack([wa[hit], wb[hit], wc[hit]], axis=1)

    mask = face_map >= 0
    pixel_index = np.flatnonzero(mask)
    tex_h, tex_w = texture.shape[:2]
    matrix = _texel_matrix(
        bary.reshape(-1, 3)[pixel_index],
        np.asarray(faces)[face_map.reshape(-1)[pixel_index]],
        uv,
        tex_h,
        tex_w,
    )
    weights = TexelWeights(
        matrix=matrix, pixel_index=pixel_index, texture_shape=(tex_h, tex_w), resolution=r
    )
    if len(pixel_index) == 0:
        logger.debug("Rasterization produced an empty mask")
    return RenderOutput(
        image=weights.compose(texture, background),
        mask=mask,
        depth=zbuf,
        texel_weights=weights,
        face_index=face_map,
    )


def _texel_matrix(
    bary: Tensor, tri: npt.NDArray[np.int64], uv: Tensor, tex_h: int, tex_w: int
) -> sparse.csr_matrix:
    """Sparse bilinear weights, one row per foreground pixel."""
    n = len(bary)
    if n == 0:
        return sparse.csr_matrix((0, tex_h * tex_w))
    bary = np.clip(bary, 0.0, None)
    bary = bary / bary.sum(axis=1, keepdims=True)
    uv_pix = np.einsum("nk,nkd->nd", bary, uv[tri])
    x = np.clip(uv_pix[:, 0], 0.0, 1.0) * (tex_w - 1)
    y = np.clip(uv_pix[:, 1], 0.0, 1.0) * (tex_h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(tex_w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(tex_h - 2, 0))
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    x1 = np.minimum(x0 + 1, tex_w - 1)
    y1 = np.minimum(y0 + 1, tex_h - 1)

    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([y0 * tex_w + x0, y0 * tex_w + x1, y1 * tex_w + x0, y1 * tex_w + x1], axis=1)
    data = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    keep = data.reshape(-1) > 0
    return sparse.csr_matrix(
        (data.reshape(-1)[keep], (rows[keep], cols.reshape(-1)[keep])),
        shape=(n, tex_h * tex_w),
    )


def image_to_points(
    image: Tensor,
    mask: npt.NDArray[np.bool_],
    n_sample: int | None = DEFAULT_N_SAMPLE,
    rng: Rng | None = None,
) -> ColoredPointSet:
    """Foreground pixels as colored points, subsampled without replacement.

    All foreground pixels are returned when n_sample is None or not smaller
    than the foreground count; otherwise rng picks the subset.
    """
    resolution = mask.shape[0]
    foreground = np.flatnonzero(mask)
    if len(foreground) == 0:
        raise RenderError("mask has no foreground pixels")
    if n_sample is not None and n_sample < len(foreground):
        if rng is None:
            raise RenderError("subsampling foreground pixels needs an rng")
        foreground = np.sort(foreground[rng.choice(len(foreground), n_sample)])
    return ColoredPointSet(
        positions=pixel_centers(foreground, resolution),
        attrs=image.reshape(-1, image.shape[-1])[foreground].copy(),
        source=foreground,
    )


def mask_to_points(mask: npt.NDArray[np.bool_]) -> Tensor:
    """One normalized point per foreground pixel centre."""
    foreground = np.flatnonzero(mask)
    if len(foreground) == 0:
        raise RenderError("mask has no foreground pixels")
    return pixel_centers(foreground, mask.shape[0])
