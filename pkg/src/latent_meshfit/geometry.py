"""Sphere template, deformation maps, smoothness regularizer and 3D Chamfer metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from latent_meshfit.tensorcore import Rng, Tensor

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class GeometryError(Exception):
    """Invalid mesh or deformation input."""

    pass


@dataclass(frozen=True)
class MeshTopology:
    """Fixed connectivity of a latitude-longitude sphere grid.

    Vertex (i, j) has flat index ``i * grid_w + j``. Seam columns j=0 and
    j=grid_w-1 coincide, as do all vertices of each pole row; ``canonical``
    maps every vertex to its identified position so adjacency crosses the seam.
    """

    grid_h: int
    grid_w: int
    faces: npt.NDArray[np.int64]
    uv: Tensor
    base_vertices: Tensor
    canonical: npt.NDArray[np.int64]
    adjacency: npt.NDArray[np.int64]

    @property
    def n_vertices(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def half_width(self) -> int:
        return (self.grid_w + 1) // 2


@dataclass
class Mesh:
    """Textured mesh: V = V_sphere + dV over a fixed topology."""

    vertices: Tensor
    topology: MeshTopology
    texture: Tensor


def face_adjacency(
    faces: npt.NDArray[np.int64], canonical: npt.NDArray[np.int64] | None = None
) -> npt.NDArray[np.int64]:
    """Pairs of faces sharing an edge, using identified vertex ids when given.

    Faces with a repeated identified vertex (collapsed pole triangles) have no
    edges and are left out.
    """
    faces = np.asarray(faces, dtype=np.int64)
    ids = faces if canonical is None else np.asarray(canonical)[faces]
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for f, (a, b, c) in enumerate(ids.tolist()):
        if a == b or b == c or a == c:
            continue
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_faces.setdefault(key, []).append(f)
    pairs = []
    for key, shared in edge_faces.items():
        if len(shared) > 2:
            raise GeometryError(f"edge {key} is shared by {len(shared)} faces")
        if len(shared) == 2:
            pairs.append(shared)
    pairs.sort()
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _mirror_plan(grid_w: int) -> tuple[npt.NDArray[np.int64], Tensor]:
    """Source half-column and x sign for every full-width column."""
    half = (grid_w + 1) // 2
    src = np.empty(grid_w, dtype=np.int64)
    sign = np.empty(grid_w)
    for j in range(grid_w):
        if j < half:
            src[j], sign[j] = j, 1.0
        else:
            src[j], sign[j] = grid_w - 1 - j, -1.0
    # Seam columns and the centre column lie on the symmetry plane
    sign[0] = sign[-1] = 0.0
    if grid_w % 2 == 1:
        sign[grid_w // 2] = 0.0
    return src, sign


def build_sphere_template(grid_h: int, grid_w: int) -> MeshTopology:
    """Latitude-longitude unit sphere with duplicated seam and pole vertices.

    Vertex (i, j) sits at theta = pi*i/(H-1), phi = 2*pi*j/(W-1) with
    position (sin(theta) sin(phi), cos(theta), sin(theta) cos(phi)), so +Y is up
    and column W-1-j is the x-mirror of column j.
    """
    if grid_h < 3 or grid_w < 3:
        raise GeometryError(f"sphere grid must be at least 3 x 3, got {grid_h} x {grid_w}")
    theta = np.pi * np.arange(grid_h) / (grid_h - 1)
    phi = 2 * np.pi * np.arange(grid_w) / (grid_w - 1)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    base = np.stack(
        [
            st * np.sin(phi)[None, :],
            np.broadcast_to(ct, (grid_h, grid_w)),
            st * np.cos(phi)[None, :],
        ],
        axis=-1,
    )
    src, sign = _mirror_plan(grid_w)
    base[:, :, 0] = base[:, src, 0] * sign[None, :]
    base[:, :, 1:] = base[:, src, 1:]
    base[0] = (0.0, 1.0, 0.0)
    base[-1] = (0.0, -1.0, 0.0)

    jj, ii = np.meshgrid(np.arange(grid_w), np.arange(grid_h))
    uv = np.stack([jj / (grid_w - 1), ii / (grid_h - 1)], axis=-1).reshape(-1, 2)

    canonical = np.empty(grid_h * grid_w, dtype=np.int64)
    ids: dict[tuple[int, int], int] = {}
    for i in range(grid_h):
        for j in range(grid_w):
            if i == 0 or i == grid_h - 1:
                key = (i, 0)
            else:
                key = (i, j % (grid_w - 1))
            canonical[i * grid_w + j] = ids.setdefault(key, len(ids))

    faces = []
    for i in range(grid_h - 1):
        for j in range(grid_w - 1):
            a = i * grid_w + j
            b, c = a + 1, a + grid_w
            d = c + 1
            faces.append((a, c, b))
            faces.append((b, c, d))
    faces_arr = np.array(faces, dtype=np.int64)

    logger.debug("Built %d x %d sphere template with %d faces", grid_h, grid_w, len(faces))
    return MeshTopology(
        grid_h=grid_h,
        grid_w=grid_w,
        faces=faces_arr,
        uv=uv,
        base_vertices=base.reshape(-1, 3),
        canonical=canonical,
        adjacency=face_adjacency(faces_arr, canonical),
    )


def apply_deformation(deformation: Tensor, topology: MeshTopology) -> Tensor:
    """V = V_sphere + dV for an H x W x 3 deformation map."""
    expected = (topology.grid_h, topology.grid_w, 3)
    if deformation.shape != expected:
        raise GeometryError(f"deformation map shape {deformation.shape} != {expected}")
    return topology.base_vertices + deformation.reshape(-1, 3)


def symmetrize(half: Tensor, grid_w: int) -> Tensor:
    """Full-width deformation map from its u in [0, 0.5] half.

    Mirrored columns copy (-x, y, z); columns on the symmetry plane get x = 0.
    """
    expected_half = (grid_w + 1) // 2
    if half.ndim != 3 or half.shape[1] != expected_half or half.shape[2] != 3:
        raise GeometryError(
            f"half map shape {half.shape} does not match width {grid_w} (half {expected_half})"
        )
    src, sign = _mirror_plan(grid_w)
    full = half[:, src, :].copy()
    full[:, :, 0] *= sign[None, :]
    return full


def symmetrize_backward(grad_full: Tensor, grid_w: int) -> Tensor:
    """Adjoint of ``symmetrize``."""
    src, sign = _mirror_plan(grid_w)
    grad = grad_full.copy()
    grad[:, :, 0] *= sign[None, :]
    grad_half = np.zeros((grad_full.shape[0], (grid_w + 1) // 2, 3))
    for j in range(grid_w):
        grad_half[:, src[j], :] += grad[:, j, :]
    return grad_half


def face_normals(vertices: Tensor, faces: npt.NDArray[np.int64]) -> Tensor:
    """Unnormalized face normals (v1 - v0) x (v2 - v0); norm is twice the area."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    return np.cross(v1 - v0, v2 - v0)


def smoothness_loss_and_grad(
    vertices: Tensor,
    faces: npt.NDArray[np.int64],
    adjacency: npt.NDArray[np.int64] | None = None,
) -> tuple[float, Tensor]:
    """Mean of 1 - cos between normals of adjacent faces, and its gradient in V.

    Pairs touching a face of area below 1e-12 are left out.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if adjacency is None:
        adjacency = face_adjacency(faces)
    if len(adjacency) == 0:
        raise GeometryError("mesh has no interior edge")
    normals = face_normals(vertices, faces)
    lengths = np.linalg.norm(normals, axis=1)
    valid = 0.5 * lengths >= DEGENERATE_AREA
    if not valid.any():
        raise GeometryError("all faces are degenerate")
    pairs = adjacency[valid[adjacency[:, 0]] & valid[adjacency[:, 1]]]
    if len(pairs) == 0:
        raise GeometryError("no adjacent pair of non-degenerate faces")

    unit = np.zeros_like(normals)
    unit[valid] = normals[valid] / lengths[valid, None]
    fa, fb = pairs[:, 0], pairs[:, 1]
    cosines = np.einsum("ij,ij->i", unit[fa], unit[fb])
    loss = float(np.mean(1.0 - cosines))

    scale = -1.0 / len(pairs)
    grad_unit = np.zeros_like(normals)
    np.add.at(grad_unit, fa, scale * unit[fb])
    np.add.at(grad_unit, fb, scale * unit[fa])
    grad_normals = np.zeros_like(normals)
    radial = np.einsum("ij,ij->i", unit[valid], grad_unit[valid])
    grad_normals[valid] = (grad_unit[valid] - unit[valid] * radial[:, None]) / lengths[valid, None]

    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    e1, e2 = v1 - v0, v2 - v0
    g_e1 = np.cross(e2, grad_normals)
    g_e2 = np.cross(grad_normals, e1)
    grad = np.zeros_like(vertices)
    np.add.at(grad, faces[:, 1], g_e1)
    np.add.at(grad, faces[:, 2], g_e2)
    np.add.at(grad, faces[:, 0], -g_e1 - g_e2)
    return loss, grad


def smoothness_loss(
    vertices: Tensor,
    faces: npt.NDArray[np.int64],
    adjacency: npt.NDArray[np.int64] | None = None,
) -> float:
    return smoothness_loss_and_grad(vertices, faces, adjacency)[0]


@dataclass(frozen=True)
class SurfaceSample:
    """Face indices and barycentric weights of surface points, reusable on any
    vertex positions over the same faces."""

    face_index: npt.NDArray[np.int64]
    barycentric: Tensor  # n x 3

    def points(self, vertices: Tensor, faces: npt.NDArray[np.int64]) -> Tensor:
        tri = vertices[faces[self.face_index]]  # n x 3 x 3
        return np.einsum("nk,nkd->nd", self.barycentric, tri)


def draw_surface_sample(
    vertices: Tensor, faces: npt.NDArray[np.int64], n: int, rng: Rng
) -> SurfaceSample:
    """Area-weighted face choice with uniform barycentric placement."""
    if n == 0:
        return SurfaceSample(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
    areas = 0.5 * np.linalg.norm(face_normals(vertices, faces), axis=1)
    total = areas.sum()
    if total <= 0:
        raise GeometryError("cannot sample a mesh with zero surface area")
    face_index = rng.generator.choice(len(faces), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(shape=n))
    r2 = rng.uniform(shape=n)
    barycentric = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return SurfaceSample(face_index=face_index, barycentric=barycentric)


def sample_surface(vertices: Tensor, faces: npt.NDArray[np.int64], n: int, rng: Rng) -> Tensor:
    """n points drawn uniformly by area from the mesh surface."""
    if n == 0:
        return np.zeros((0, 3))
    return draw_surface_sample(vertices, faces, n, rng).points(vertices, faces)


def chamfer3d(p: Tensor, q: Tensor) -> float:
    """Symmetric mean of unsquared nearest-neighbour distances between point sets."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        raise GeometryError("chamfer3d needs two non-empty point sets")
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return float(0.5 * (d_pq.mean() + d_qp.mean()))
