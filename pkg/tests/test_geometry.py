"""Tests for the sphere template, deformation maps, smoothness and 3D Chamfer."""

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from latent_meshfit.camera import quat_to_matrix
from latent_meshfit.geometry import (
    GeometryError,
    apply_deformation,
    build_sphere_template,
    chamfer3d,
    face_adjacency,
    face_normals,
    sample_surface,
    smoothness_loss,
    smoothness_loss_and_grad,
    symmetrize,
    symmetrize_backward,
)
from latent_meshfit.tensorcore import Rng, grad_check


class TestSphereTemplate:
    """Tests for build_sphere_template."""

    def test_smallest_grid(self):
        """A 3 x 3 grid should have 9 vertices and 8 triangles on the unit sphere."""
        topology = build_sphere_template(3, 3)
        assert topology.base_vertices.shape == (9, 3)
        assert topology.faces.shape == (8, 3)
        norms = np.linalg.norm(topology.base_vertices, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_below_minimum_raises(self):
        """Grids smaller than 3 x 3 should be rejected."""
        with pytest.raises(GeometryError):
            build_sphere_template(2, 5)

    def test_euler_characteristic(self):
        """The 32 x 32 template should be a closed genus-0 surface after identification."""
        topology = build_sphere_template(32, 32)
        assert topology.n_vertices == 1024
        ids = topology.canonical[topology.faces]
        proper = [tuple(f) for f in ids.tolist() if len(set(f)) == 3]
        edges = set()
        for a, b, c in proper:
            for u, v in ((a, b), (b, c), (c, a)):
                edges.add((min(u, v), max(u, v)))
        n_vertices = len(set(topology.canonical.tolist()))
        assert n_vertices - len(edges) + len(proper) == 2

    def test_face_normals_sum_to_zero(self):
        """Area-weighted normals of the closed template should cancel."""
        for grid_h, grid_w in ((3, 3), (9, 9), (12, 17)):
            topology = build_sphere_template(grid_h, grid_w)
            total = face_normals(topology.base_vertices, topology.faces).sum(axis=0)
            np.testing.assert_allclose(total, 0.0, atol=1e-9)

    def test_faces_point_one_way(self):
        """Every face normal should point away from the origin."""
        topology = build_sphere_template(9, 9)
        normals = face_normals(topology.base_vertices, topology.faces)
        centers = topology.base_vertices[topology.faces].mean(axis=1)
        big = np.linalg.norm(normals, axis=1) > 1e-9
        signs = np.sign(np.einsum("ij,ij->i", normals[big], centers[big]))
        assert len(set(signs.tolist())) == 1

    def test_seam_columns_coincide(self):
        """Columns 0 and W-1 should hold the same positions."""
        topology = build_sphere_template(9, 9)
        grid = topology.base_vertices.reshape(9, 9, 3)
        assert np.array_equal(grid[:, 0], grid[:, -1])

    def test_adjacency_crosses_the_seam(self):
        """Each non-degenerate face should have exactly three neighbours."""
        topology = build_sphere_template(9, 9)
        counts = np.bincount(topology.adjacency.reshape(-1), minlength=len(topology.faces))
        ids = topology.canonical[topology.faces]
        proper = np.array([len(set(f)) == 3 for f in ids.tolist()])
        assert np.all(counts[proper] == 3)
        assert np.all(counts[~proper] == 0)


class TestDeformation:
    """Tests for apply_deformation and symmetrize."""

    def test_zero_deformation(self, small_topology):
        """S = 0 should give the template exactly."""
        vertices = apply_deformation(np.zeros((9, 9, 3)), small_topology)
        assert np.array_equal(vertices, small_topology.base_vertices)

    def test_constant_translation(self, small_topology):
        """A constant S should translate every vertex."""
        deformation = np.zeros((9, 9, 3))
        deformation[:, :, 0] = 0.1
        vertices = apply_deformation(deformation, small_topology)
        np.testing.assert_allclose(
            vertices - small_topology.base_vertices, [[0.1, 0.0, 0.0]] * 81, atol=1e-15
        )

    def test_wrong_shape_raises(self, small_topology):
        """A deformation map of the wrong shape should raise."""
        with pytest.raises(GeometryError):
            apply_deformation(np.zeros((8, 9, 3)), small_topology)

    def test_sum_gradient_is_all_ones(self, small_topology):
        """d sum(V) / dS should be all ones."""

        def f(s):
            return float(apply_deformation(s, small_topology).sum()), np.ones_like(s)

        report = grad_check(f, Rng(0).normal((9, 9, 3)))
        assert report.passed(1e-6)

    def test_symmetrize_zeros(self):
        """An all-zero half map should give an all-zero full map."""
        assert np.array_equal(symmetrize(np.zeros((4, 5, 3)), 9), np.zeros((4, 9, 3)))

    def test_symmetrize_mirrors_x(self):
        """Mirrored columns should copy (-x, y, z); plane columns get x = 0."""
        half = Rng(1).normal((4, 5, 3))
        full = symmetrize(half, 9)
        for j in range(1, 4):
            mirror = 8 - j
            assert full[:, mirror, 0] == pytest.approx(-full[:, j, 0])
            assert np.array_equal(full[:, mirror, 1:], full[:, j, 1:])
        assert np.all(full[:, [0, 4, 8], 0] == 0.0)

    def test_symmetrize_even_width(self):
        """An even width should mirror every column pair."""
        half = Rng(2).normal((3, 4, 3))
        full = symmetrize(half, 8)
        assert full.shape == (3, 8, 3)
        assert np.array_equal(full[:, 4, 1:], full[:, 3, 1:])

    def test_symmetrize_backward_is_adjoint(self):
        """<symmetrize(h), g> should equal <h, symmetrize_backward(g)>."""
        rng = Rng(3)
        half = rng.normal((5, 6, 3))
        grad = rng.normal((5, 11, 3))
        lhs = np.sum(symmetrize(half, 11) * grad)
        rhs = np.sum(half * symmetrize_backward(grad, 11))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_symmetrize_bad_half_width(self):
        """A half map that does not match the width should raise."""
        with pytest.raises(GeometryError):
            symmetrize(np.zeros((3, 3, 3)), 9)


class TestSmoothness:
    """Tests for the normal-consistency regularizer."""

    def test_flat_patch_is_zero(self):
        """Coplanar faces should have zero loss."""
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        assert smoothness_loss(vertices, faces) == 0.0

    def test_right_angle_fold(self):
        """Two triangles folded at 90 degrees should give 1 - cos 90 = 1."""
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        faces = np.array([[0, 1, 2], [1, 0, 3]])
        assert smoothness_loss(vertices, faces) == pytest.approx(1.0, abs=1e-12)

    def test_all_degenerate_raises(self):
        """A mesh of zero-area faces should raise."""
        vertices = np.zeros((4, 3))
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        with pytest.raises(GeometryError):
            smoothness_loss(vertices, faces)

    def test_no_shared_edge_raises(self):
        """Faces with no shared edge should raise."""
        vertices = Rng(0).normal((6, 3))
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        with pytest.raises(GeometryError):
            smoothness_loss(vertices, faces)

    def test_gradient(self, small_topology):
        """The analytic gradient should match central differences."""
        noisy = small_topology.base_vertices + 0.05 * Rng(4).normal((81, 3))

        def f(x):
            value, grad = smoothness_loss_and_grad(
                x.reshape(-1, 3), small_topology.faces, small_topology.adjacency
            )
            return value, grad.reshape(-1)

        coords = list(range(0, 243, 7))
        report = grad_check(f, noisy.reshape(-1), coords=coords)
        assert report.passed(1e-4)

    def test_rigid_motion_invariant(self, small_topology):
        """Rotating and translating the mesh leaves the loss unchanged."""
        noisy = small_topology.base_vertices + 0.05 * Rng(6).normal((81, 3))
        rotation = quat_to_matrix(np.array([0.8, 0.3, -0.4, 0.2]))
        moved = noisy @ rotation.T + np.array([0.5, -1.0, 2.0])
        faces, adjacency = small_topology.faces, small_topology.adjacency
        before = smoothness_loss(noisy, faces, adjacency)
        assert smoothness_loss(moved, faces, adjacency) == pytest.approx(before, abs=1e-9)

    def test_face_adjacency_without_identification(self):
        """Plain adjacency should pair faces sharing a vertex-index edge."""
        faces = np.array([[0, 1, 2], [1, 3, 2], [3, 4, 2]])
        assert face_adjacency(faces).tolist() == [[0, 1], [1, 2]]


class TestSurfaceSampling:
    """Tests for sample_surface."""

    def test_points_lie_on_the_triangle_plane(self):
        """Samples of a single triangle should satisfy its plane equation."""
        vertices = np.array([[0.0, 0, 0], [1, 0.2, 0.5], [0.3, 1, -0.4]])
        faces = np.array([[0, 1, 2]])
        points = sample_surface(vertices, faces, 1000, Rng(0))
        normal = np.cross(vertices[1] - vertices[0], vertices[2] - vertices[0])
        residual = (points - vertices[0]) @ normal
        assert points.shape == (1000, 3)
        assert np.max(np.abs(residual)) < 1e-9

    def test_sphere_samples_near_unit_norm(self):
        """Samples of the 32 x 32 template should lie just inside the unit sphere."""
        topology = build_sphere_template(32, 32)
        points = sample_surface(topology.base_vertices, topology.faces, 4096, Rng(1))
        mean_norm = np.linalg.norm(points, axis=1).mean()
        assert 0.95 <= mean_norm <= 1.0

    def test_zero_samples(self):
        """n = 0 should return an empty set."""
        topology = build_sphere_template(3, 3)
        assert sample_surface(topology.base_vertices, topology.faces, 0, Rng(0)).shape == (0, 3)

    def test_deterministic(self, small_topology):
        """The same rng seed should give the same samples."""
        a = sample_surface(small_topology.base_vertices, small_topology.faces, 50, Rng(9))
        b = sample_surface(small_topology.base_vertices, small_topology.faces, 50, Rng(9))
        assert np.array_equal(a, b)


class TestChamfer3d:
    """Tests for chamfer3d."""

    def test_identical_sets(self):
        """P = Q should give 0."""
        p = Rng(0).normal((20, 3))
        assert chamfer3d(p, p) == 0.0

    def test_single_pair(self):
        """Two single points one unit apart should give 1."""
        assert chamfer3d(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == pytest.approx(1.0)

    def test_matches_exhaustive_scan(self):
        """The tree search should agree with a brute-force distance matrix."""
        rng = Rng(5)
        p, q = rng.normal((40, 3)), rng.normal((55, 3))
        dist = cdist(p, q)
        expected = 0.5 * (dist.min(axis=1).mean() + dist.min(axis=0).mean())
        assert chamfer3d(p, q) == pytest.approx(expected, abs=1e-12)

    def test_symmetric(self):
        """Swapping the operands gives the same distance."""
        rng = Rng(6)
        p, q = rng.normal((30, 3)), rng.normal((45, 3))
        assert chamfer3d(p, q) == pytest.approx(chamfer3d(q, p), abs=1e-15)

    def test_rigid_motion_invariant(self):
        """A common rotation and translation of both sets leaves the distance unchanged."""
        rng = Rng(7)
        p, q = rng.normal((40, 3)), rng.normal((35, 3))
        rotation = quat_to_matrix(np.array([0.5, -0.5, 0.5, 0.5]))
        offset = np.array([1.0, 2.0, -3.0])
        moved = chamfer3d(p @ rotation.T + offset, q @ rotation.T + offset)
        assert moved == pytest.approx(chamfer3d(p, q), abs=1e-9)

    def test_empty_set_raises(self):
        """An empty operand should raise."""
        with pytest.raises(GeometryError):
            chamfer3d(np.zeros((0, 3)), np.ones((2, 3)))
