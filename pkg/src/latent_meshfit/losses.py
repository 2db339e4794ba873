"""2D objective terms: Chamfer texture and mask losses, regularizers and baselines.

Every differentiable loss has an ``*_and_grad`` form returning the value and
the gradient w.r.t. its differentiable operand. Nearest-neighbour assignments
are constants during backward; ties go to the lowest index.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import numpy.typing as npt
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from latent_meshfit.models import ChamferTexParams
from latent_meshfit.render import ColoredPointSet, RenderError, image_to_points
from latent_meshfit.tensorcore import Rng, Tensor

logger = logging.getLogger(__name__)

TILE_ROWS = 1024
SPATIAL_CANDIDATES = 128
APPEARANCE_CANDIDATES = 32
BOUND_SLACK = 1e-12
FEATURE_STRIDE = 4
FEATURE_DIM = 8
LUMA = np.array([0.299, 0.587, 0.114])


class LossError(Exception):
    """Invalid loss operands."""

    pass


@dataclass(frozen=True)
class _Assignment:
    """Row-wise and column-wise minima of a distance matrix."""

    row_min: Tensor
    row_arg: npt.NDArray[np.int64]
    col_min: Tensor
    col_arg: npt.NDArray[np.int64]

    @property
    def value(self) -> float:
        return float(0.5 * (self.row_min.mean() + self.col_min.mean()))


def _assign(cost: Callable[[int, int], Tensor], n_rows: int, n_cols: int) -> _Assignment:
    """Minima of cost(i0, i1) blocks, keeping the lowest index on ties."""
    row_min = np.empty(n_rows)
    row_arg = np.empty(n_rows, dtype=np.int64)
    col_min = np.full(n_cols, np.inf)
    col_arg = np.zeros(n_cols, dtype=np.int64)
    for i0 in range(0, n_rows, TILE_ROWS):
        i1 = min(i0 + TILE_ROWS, n_rows)
        block = cost(i0, i1)
        row_arg[i0:i1] = block.argmin(axis=1)
        row_min[i0:i1] = block[np.arange(i1 - i0), row_arg[i0:i1]]
        arg = block.argmin(axis=0)
        best = block[arg, np.arange(n_cols)]
        better = best < col_min
        col_min[better] = best[better]
        col_arg[better] = arg[better] + i0
    return _Assignment(row_min, row_arg, col_min, col_arg)


def _unit_rows(diff: Tensor) -> Tensor:
    """diff / |diff| per row, zero where |diff| is zero."""
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    out = np.zeros_like(diff)
    nz = norm[:, 0] > 0
    out[nz] = diff[nz] / norm[nz]
    return out


def _spatial_factor(dist: Tensor, params: ChamferTexParams) -> Tensor:
    if params.ignore_positions:
        return np.ones_like(dist)
    return np.maximum((dist + params.eps_s) ** params.alpha, 1.0)


def _texture_cost(
    positions: Tensor, attrs: Tensor, ref: ColoredPointSet, params: ChamferTexParams
) -> Tensor:
    return _spatial_factor(cdist(positions, ref.positions), params) * (
        cdist(attrs, ref.attrs) + params.eps_a
    )


def _nearest(
    query: ColoredPointSet, ref: ColoredPointSet, params: ChamferTexParams
) -> tuple[Tensor, npt.NDArray[np.int64]]:
    """Exact minimum and argmin of the texture cost from every query point over ref.

    Candidates are the nearest ref points by position and by appearance. Any
    other point is at least as far in both, so its cost is bounded below by
    the cost built from the farthest candidate distances; rows whose best
    candidate is strictly under that bound are settled, the rest are scanned
    densely. Ties go to the lowest ref index either way.
    """
    n = len(query)
    k_pos = min(SPATIAL_CANDIDATES, len(ref))
    k_attr = min(APPEARANCE_CANDIDATES, len(ref))
    pos_dist, pos_idx = cKDTree(ref.positions).query(query.positions, k=k_pos)
    attr_dist, attr_idx = cKDTree(ref.attrs).query(query.attrs, k=k_attr)
    pos_dist = pos_dist.reshape(n, k_pos)
    attr_dist = attr_dist.reshape(n, k_attr)
    candidates = np.sort(
        np.concatenate([pos_idx.reshape(n, k_pos), attr_idx.reshape(n, k_attr)], axis=1), axis=1
    )

    best = np.empty(n)
    arg = np.empty(n, dtype=np.int64)
    for i0 in range(0, n, TILE_ROWS):
        i1 = min(i0 + TILE_ROWS, n)
        cand = candidates[i0:i1]
        spatial = np.linalg.norm(query.positions[i0:i1, None, :] - ref.positions[cand], axis=2)
        appearance = np.linalg.norm(query.attrs[i0:i1, None, :] - ref.attrs[cand], axis=2)
        cost = _spatial_factor(spatial, params) * (appearance + params.eps_a)
        pick = cost.argmin(axis=1)
        rows = np.arange(i1 - i0)
        best[i0:i1] = cost[rows, pick]
        arg[i0:i1] = cand[rows, pick]

    if max(k_pos, k_attr) == len(ref):
        return best, arg
    bound = _spatial_factor(pos_dist[:, -1], params) * (attr_dist[:, -1] + params.eps_a)
    unsettled = np.flatnonzero(~(best < bound * (1.0 - BOUND_SLACK)))
    for start in range(0, len(unsettled), TILE_ROWS):
        rows = unsettled[start : start + TILE_ROWS]
        block = _texture_cost(query.positions[rows], query.attrs[rows], ref, params)
        arg[rows] = block.argmin(axis=1)
        best[rows] = block[np.arange(len(rows)), arg[rows]]
    return best, arg


def chamfer_set_distance_and_grad(
    a: ColoredPointSet, b: ColoredPointSet, params: ChamferTexParams
) -> tuple[float, Tensor, Tensor]:
    """Chamfer distance between colored point sets with a frozen spatial weight.

    D = max((D^s + eps_s)^alpha, 1) * (D^a + eps_a); the value is half the sum
    of the mean row-wise and mean column-wise minima.

    Returns:
        Tuple of (value, grad w.r.t. a.attrs, grad w.r.t. b.attrs)
    """
    if len(a) == 0 or len(b) == 0:
        raise LossError("Chamfer texture loss needs two non-empty point sets")
    if a.dim != b.dim:
        raise LossError(f"appearance dimensions differ: {a.dim} != {b.dim}")

    row_min, row_arg = _nearest(a, b, params)
    col_min, col_arg = _nearest(b, a, params)
    match = _Assignment(row_min, row_arg, col_min, col_arg)
    grad_a = np.zeros_like(a.attrs)
    grad_b = np.zeros_like(b.attrs)

    # a -> b direction
    partner = match.row_arg
    weight = _spatial_factor(
        np.linalg.norm(a.positions - b.positions[partner], axis=1), params
    )
    g = (0.5 / len(a)) * weight[:, None] * _unit_rows(a.attrs - b.attrs[partner])
    grad_a += g
    np.add.at(grad_b, partner, -g)

    # b -> a direction
    partner = match.col_arg
    weight = _spatial_factor(
        np.linalg.norm(b.positions - a.positions[partner], axis=1), params
    )
    g = (0.5 / len(b)) * weight[:, None] * _unit_rows(b.attrs - a.attrs[partner])
    grad_b += g
    np.add.at(grad_a, partner, -g)
    return match.value, grad_a, grad_b


def chamfer_set_distance(
    a: ColoredPointSet, b: ColoredPointSet, params: ChamferTexParams
) -> float:
    return chamfer_set_distance_and_grad(a, b, params)[0]


def _require_foreground(mask: npt.NDArray[np.bool_], what: str) -> None:
    if not mask.any():
        raise LossError(f"{what} mask is empty")


def pixel_chamfer_texture_loss_and_grad(
    rendered_image: Tensor,
    rendered_mask: npt.NDArray[np.bool_],
    input_image: Tensor,
    input_mask: npt.NDArray[np.bool_],
    params: ChamferTexParams,
    n_sample: int | None = None,
    rng: Rng | None = None,
) -> tuple[float, Tensor]:
    """Pixel-level Chamfer texture loss and its gradient w.r.t. the rendered image.

    Both foreground sets are subsampled independently to n_sample points with
    rng; n_sample=None uses every foreground pixel.
    """
    _require_foreground(rendered_mask, "rendered")
    _require_foreground(input_mask, "input")
    try:
        ours = image_to_points(rendered_image, rendered_mask, n_sample, rng)
        theirs = image_to_points(input_image, input_mask, n_sample, rng)
    except RenderError as e:
        raise LossError(str(e)) from e
    value, grad_ours, _ = chamfer_set_distance_and_grad(ours, theirs, params)
    grad_image = np.zeros_like(rendered_image).reshape(-1, 3)
    np.add.at(grad_image, ours.source, grad_ours)
    return value, grad_image.reshape(rendered_image.shape)


def pixel_chamfer_texture_loss(
    rendered_image: Tensor,
    rendered_mask: npt.NDArray[np.bool_],
    input_image: Tensor,
    input_mask: npt.NDArray[np.bool_],
    params: ChamferTexParams,
    n_sample: int | None = None,
    rng: Rng | None = None,
) -> float:
    return pixel_chamfer_texture_loss_and_grad(
        rendered_image, rendered_mask, input_image, input_mask, params, n_sample, rng
    )[0]


def _clamped_1d(n: int, taps: dict[int, float]) -> sparse.csr_matrix:
    """1D correlation with edge-replicated (nearest) boundary as an n x n matrix."""
    rows, cols, vals = [], [], []
    for i in range(n):
        for offset, weight in taps.items():
            rows.append(i)
            cols.append(min(max(i + offset, 0), n - 1))
            vals.append(weight)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _gaussian_taps(radius: int = 2, sigma: float = 1.0) -> dict[int, float]:
    offsets = np.arange(-radius, radius + 1)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    weights /= weights.sum()
    return {int(o): float(w) for o, w in zip(offsets, weights, strict=True)}


@dataclass(frozen=True)
class _FeatureBank:
    """Pooled linear feature operators for one image resolution."""

    sobel_x: sparse.csr_matrix  # cells x pixels, on luminance
    sobel_y: sparse.csr_matrix
    blur: sparse.csr_matrix  # cells x pixels, per RGB channel
    pool: sparse.csr_matrix
    n_cells: int


@lru_cache(maxsize=8)
def _feature_bank(resolution: int, stride: int) -> _FeatureBank:
    if resolution < stride:
        raise LossError(f"resolution {resolution} is below the feature stride {stride}")
    n_cells = resolution // stride
    pool_1d = sparse.csr_matrix(
        (
            np.full(n_cells * stride, 1.0 / stride),
            (np.repeat(np.arange(n_cells), stride), np.arange(n_cells * stride)),
        ),
        shape=(n_cells, resolution),
    )
    pool = sparse.kron(pool_1d, pool_1d, format="csr")
    smooth = _clamped_1d(resolution, {-1: 1.0, 0: 2.0, 1: 1.0})
    deriv_x = _clamped_1d(resolution, {-1: -1.0, 1: 1.0})
    # Rows run downward while y points up
    deriv_y = _clamped_1d(resolution, {-1: 1.0, 1: -1.0})
    gauss = _clamped_1d(resolution, _gaussian_taps())
    return _FeatureBank(
        sobel_x=(pool @ sparse.kron(smooth, deriv_x, format="csr") / 8.0).tocsr(),
        sobel_y=(pool @ sparse.kron(deriv_y, smooth, format="csr") / 8.0).tocsr(),
        blur=(pool @ sparse.kron(gauss, gauss, format="csr")).tocsr(),
        pool=pool,
        n_cells=n_cells,
    )


def feature_maps(image: Tensor, stride: int = FEATURE_STRIDE) -> Tensor:
    """Per-cell features (Sobel-x, Sobel-y, blurred RGB, raw RGB) as cells x cells x 8."""
    resolution = image.shape[0]
    bank = _feature_bank(resolution, stride)
    flat = image.reshape(-1, 3)
    gray = flat @ LUMA
    features = np.column_stack(
        [bank.sobel_x @ gray, bank.sobel_y @ gray, bank.blur @ flat, bank.pool @ flat]
    )
    return features.reshape(bank.n_cells, bank.n_cells, FEATURE_DIM)


def _feature_backward(grad_cells: Tensor, resolution: int, stride: int) -> Tensor:
    """Adjoint of ``feature_maps`` for gradients given per cell (n_cells^2 x 8)."""
    bank = _feature_bank(resolution, stride)
    grad_gray = bank.sobel_x.T @ grad_cells[:, 0] + bank.sobel_y.T @ grad_cells[:, 1]
    grad = bank.blur.T @ grad_cells[:, 2:5] + bank.pool.T @ grad_cells[:, 5:8]
    grad += np.outer(grad_gray, LUMA)
    return np.asarray(grad).reshape(resolution, resolution, 3)


def extract_features(
    image: Tensor, mask: npt.NDArray[np.bool_], stride: int = FEATURE_STRIDE
) -> ColoredPointSet:
    """Feature cells whose pixels are at least half foreground, as a colored point set."""
    if not mask.any():
        raise LossError("cannot extract features from an empty mask")
    resolution = mask.shape[0]
    bank = _feature_bank(resolution, stride)
    coverage = bank.pool @ mask.reshape(-1).astype(np.float64)
    cells = np.flatnonzero(coverage >= 0.5)
    features = feature_maps(image, stride).reshape(-1, FEATURE_DIM)
    positions = _cell_centers(cells, bank.n_cells, stride, resolution)
    return ColoredPointSet(positions=positions, attrs=features[cells], source=cells)


def _cell_centers(
    cells: npt.NDArray[np.int64], n_cells: int, stride: int, resolution: int
) -> Tensor:
    rows, cols = np.divmod(cells, n_cells)
    centre_col = cols * stride + 0.5 * (stride - 1)
    centre_row = rows * stride + 0.5 * (stride - 1)
    return np.stack(
        [(2 * centre_col + 1) / resolution - 1.0, 1.0 - (2 * centre_row + 1) / resolution], axis=1
    )


def feature_chamfer_texture_loss_and_grad(
    rendered_image: Tensor,
    rendered_mask: npt.NDArray[np.bool_],
    input_image: Tensor,
    input_mask: npt.NDArray[np.bool_],
    params: ChamferTexParams,
    stride: int = FEATURE_STRIDE,
) -> tuple[float, Tensor]:
    """Feature-level Chamfer texture loss and its gradient w.r.t. the rendered image."""
    _require_foreground(rendered_mask, "rendered")
    _require_foreground(input_mask, "input")
    ours = extract_features(rendered_image, rendered_mask, stride)
    theirs = extract_features(input_image, input_mask, stride)
    if len(ours) == 0 or len(theirs) == 0:
        raise LossError("no feature cell is at least half foreground")
    value, grad_ours, _ = chamfer_set_distance_and_grad(ours, theirs, params)
    bank = _feature_bank(rendered_mask.shape[0], stride)
    grad_cells = np.zeros((bank.n_cells * bank.n_cells, FEATURE_DIM))
    grad_cells[ours.source] = grad_ours
    return value, _feature_backward(grad_cells, rendered_mask.shape[0], stride)


def feature_chamfer_texture_loss(
    rendered_image: Tensor,
    rendered_mask: npt.NDArray[np.bool_],
    input_image: Tensor,
    input_mask: npt.NDArray[np.bool_],
    params: ChamferTexParams,
    stride: int = FEATURE_STRIDE,
) -> float:
    return feature_chamfer_texture_loss_and_grad(
        rendered_image, rendered_mask, input_image, input_mask, params, stride
    )[0]


def chamfer_mask_loss_and_grad(projected: Tensor, mask_points: Tensor) -> tuple[float, Tensor]:
    """Chamfer distance between projected vertices and foreground pixel centres.

    Returns:
        Tuple of (value, grad w.r.t. projected vertices)
    """
    projected = np.asarray(projected, dtype=np.float64)
    mask_points = np.asarray(mask_points, dtype=np.float64)
    if len(projected) == 0 or len(mask_points) == 0:
        raise LossError("Chamfer mask loss needs two non-empty point sets")

    def cost(i0: int, i1: int) -> Tensor:
        return cdist(projected[i0:i1], mask_points)

    match = _assign(cost, len(projected), len(mask_points))
    grad = (0.5 / len(projected)) * _unit_rows(projected - mask_points[match.row_arg])
    back = (0.5 / len(mask_points)) * _unit_rows(projected[match.col_arg] - mask_points)
    np.add.at(grad, match.col_arg, back)
    return match.value, grad


def chamfer_mask_loss(projected: Tensor, mask_points: Tensor) -> float:
    return chamfer_mask_loss_and_grad(projected, mask_points)[0]


def latent_reg_and_grad(z: Tensor) -> tuple[float, Tensor]:
    """|z|^2 / dim(z)."""
    z = np.asarray(z, dtype=np.float64)
    return float(np.dot(z, z) / z.size), 2.0 * z / z.size


def latent_reg(z: Tensor) -> float:
    return latent_reg_and_grad(z)[0]


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {a.shape} != {b.shape}")


def iou_mask_loss(mask_a: npt.NDArray[np.bool_], mask_b: npt.NDArray[np.bool_]) -> float:
    """1 - |A n B| / |A u B|; two empty masks give 0."""
    _check_shapes(mask_a, mask_b)
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return 1.0 - np.count_nonzero(a & b) / union


def l1_loss(x_a: np.ndarray, x_b: np.ndarray) -> float:
    """Mean absolute difference of masks or images."""
    _check_shapes(x_a, x_b)
    diff = np.asarray(x_a, dtype=np.float64) - np.asarray(x_b, dtype=np.float64)
    return float(np.mean(np.abs(diff)))


def l1_texture_loss_and_grad(rendered_image: Tensor, input_image: Tensor) -> tuple[float, Tensor]:
    """Pixel-aligned L1 loss on RGB images and its gradient w.r.t. the rendered image."""
    _check_shapes(rendered_image, input_image)
    diff = rendered_image - input_image
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
