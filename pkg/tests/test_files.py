"""Tests for mesh, image, table and truth files."""

import numpy as np
import pytest
from PIL import Image

from latent_meshfit.camera import CameraPose
from latent_meshfit.files import (
    MTL_NAME,
    TRACE_COLUMNS,
    MeshFileError,
    load_mask,
    load_png,
    quantize,
    read_json,
    read_obj,
    read_trace,
    read_truth,
    save_mask,
    save_png,
    write_json,
    write_obj,
    write_trace,
    write_truth,
)
from latent_meshfit.geometry import build_sphere_template
from latent_meshfit.models import TraceRow
from latent_meshfit.tensorcore import Rng


class TestObj:
    """Tests for OBJ/MTL export and import."""

    def test_round_trip(self, tmp_path):
        """Vertices come back as their 32-bit values; faces and uv are preserved."""
        topology = build_sphere_template(9, 9)
        vertices = topology.base_vertices + 0.01 * Rng(0).normal(topology.base_vertices.shape)
        path = tmp_path / "mesh.obj"
        write_obj(path, vertices, topology.uv, topology.faces)
        mesh = read_obj(path)
        assert np.array_equal(mesh.vertices.astype(np.float32), vertices.astype(np.float32))
        assert np.array_equal(mesh.faces, topology.faces)
        np.testing.assert_allclose(mesh.uv, topology.uv, atol=1e-8)
        assert mesh.texture_path == tmp_path / "texture.png"

    def test_writes_mtl(self, tmp_path):
        """The MTL file sits next to the OBJ and names the texture."""
        topology = build_sphere_template(3, 3)
        write_obj(
            tmp_path / "mesh.obj", topology.base_vertices, topology.uv, topology.faces, "tex.png"
        )
        mtl = (tmp_path / MTL_NAME).read_text()
        assert "map_Kd tex.png" in mtl
        assert (tmp_path / "mesh.obj").read_text().startswith(f"mtllib {MTL_NAME}\n")

    def test_vt_flips_v(self, tmp_path):
        """vt records store 1 - v."""
        path = tmp_path / "tri.obj"
        write_obj(
            path,
            np.eye(3),
            np.array([[0.0, 0.25], [1.0, 0.0], [0.5, 1.0]]),
            np.array([[0, 1, 2]]),
        )
        lines = [line for line in path.read_text().splitlines() if line.startswith("vt")]
        assert lines == ["vt 0 0.75", "vt 1 1", "vt 0.5 0"]

    def test_missing_file(self, tmp_path):
        """Reading a missing OBJ raises MeshFileError."""
        with pytest.raises(MeshFileError, match="not found"):
            read_obj(tmp_path / "absent.obj")

    def test_quads_rejected(self, tmp_path):
        """Only triangles are supported."""
        path = tmp_path / "quad.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
            "vt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n"
        )
        with pytest.raises(MeshFileError, match="triangles"):
            read_obj(path)

    def test_mismatched_indices(self, tmp_path):
        """Vertex and texture indices must match."""
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/2 2/2 3/3\n")
        with pytest.raises(MeshFileError, match="differ"):
            read_obj(path)

    def test_index_out_of_range(self, tmp_path):
        """Faces must reference existing vertices."""
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 4/4\n")
        with pytest.raises(MeshFileError, match="out of range"):
            read_obj(path)

    def test_malformed_record(self, tmp_path):
        """Non-numeric coordinates name the line."""
        path = tmp_path / "bad.obj"
        path.write_text("v 0 zero 0\n")
        with pytest.raises(MeshFileError, match=":1:"):
            read_obj(path)


class TestImages:
    """Tests for PNG images and masks."""

    def test_png_round_trip_is_quantized(self, tmp_path):
        """A saved image loads back as its 8-bit quantization."""
        image = Rng(0).uniform(shape=(16, 16, 3))
        save_png(tmp_path / "a.png", image)
        loaded = load_png(tmp_path / "a.png")
        assert np.array_equal(loaded, quantize(image))

    def test_quantize_is_idempotent(self):
        """Quantizing twice equals quantizing once."""
        image = quantize(Rng(1).uniform(shape=(4, 4, 3)))
        assert np.array_equal(quantize(image), image)

    def test_mask_round_trip(self, tmp_path):
        """Masks are saved as 0/255 and load back unchanged."""
        mask = Rng(2).uniform(shape=(16, 16)) > 0.5
        save_mask(tmp_path / "m.png", mask)
        assert np.array_equal(load_mask(tmp_path / "m.png"), mask)

    def test_mask_threshold(self, tmp_path):
        """Gray 128 is foreground and 127 is background."""
        gray = np.array([[127, 128], [0, 255]], dtype=np.uint8)
        Image.fromarray(gray).save(tmp_path / "g.png")
        assert load_mask(tmp_path / "g.png").tolist() == [[False, True], [False, True]]


class TestTables:
    """Tests for trace, JSON and truth files."""

    def test_trace_columns(self, tmp_path):
        """trace.csv has the documented columns in order."""
        rows = [TraceRow(0, i, 1.0 / (i + 1), 0.5, 0.1, 0.2, 0.01, 0.05) for i in range(3)]
        write_trace(tmp_path / "trace.csv", rows)
        frame = read_trace(tmp_path / "trace.csv")
        assert list(frame.columns) == TRACE_COLUMNS
        assert frame["iter"].tolist() == [0, 1, 2]

    def test_json_round_trip(self, tmp_path):
        """JSON summaries load back to the same data."""
        data = {"iou": 0.75, "pose": {"scale": 0.8, "quat": [1.0, 0.0, 0.0, 0.0]}}
        write_json(tmp_path / "summary.json", data)
        assert read_json(tmp_path / "summary.json") == data

    def test_json_nan_becomes_null(self, tmp_path):
        """Non-finite floats are written as null so the file stays valid JSON."""
        data = {"tex_mae": float("nan"), "iou": 0.0, "per_view": [np.float64("inf"), 1.5]}
        write_json(tmp_path / "summary.json", data)
        text = (tmp_path / "summary.json").read_text()
        assert "NaN" not in text and "Infinity" not in text
        assert read_json(tmp_path / "summary.json") == {
            "tex_mae": None,
            "iou": 0.0,
            "per_view": [None, 1.5],
        }

    def test_truth_round_trip(self, tmp_path):
        """truth.miv1 stores z and both poses in 32-bit precision."""
        z = Rng(3).normal(8).astype(np.float32).astype(np.float64)
        pose = CameraPose(scale=0.75, translation=[0.125, -0.25], quat=[1.0, 0.0, 0.5, 0.0])
        init = CameraPose(scale=0.5)
        write_truth(tmp_path / "truth.miv1", z, pose, init)
        z2, pose2, init2 = read_truth(tmp_path / "truth.miv1")
        assert np.array_equal(z2, z)
        assert np.array_equal(pose2.to_vector(), pose.to_vector())
        assert np.array_equal(init2.to_vector(), init.to_vector())
