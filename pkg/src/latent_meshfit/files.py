"""Artifact I/O: OBJ/MTL meshes, PNG images and masks, CSV tables, JSON summaries."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd
from PIL import Image

from latent_meshfit.camera import CameraPose
from latent_meshfit.models import TraceRow
from latent_meshfit.tensorcore import Tensor, load_tensors, save_tensors

logger = logging.getLogger(__name__)

MTL_NAME = "material.mtl"
MATERIAL = "mesh_texture"
MASK_THRESHOLD = 128
TRACE_COLUMNS = ["stage", "iter", "total", "l_pct", "l_fct", "l_cm", "l_smooth", "l_z"]


class MeshFileError(Exception):
    """Malformed or unsupported OBJ/MTL content."""

    pass


@dataclass
class ObjMesh:
    """Geometry read back from an OBJ file; uv is per vertex."""

    vertices: Tensor
    uv: Tensor
    faces: npt.NDArray[np.int64]
    texture_path: Path | None = None


def write_obj(
    path: str | Path,
    vertices: Tensor,
    uv: Tensor,
    faces: npt.NDArray[np.int64],
    texture_name: str = "texture.png",
) -> None:
    """Write mesh.obj with ``v``, ``vt`` and ``f v/vt`` records plus its MTL file.

    ``vt`` stores (u, 1 - v) so image row 0 of the texture is v = 0. The MTL
    is written next to the OBJ and references texture_name.
    """
    path = Path(path)
    lines = [f"mtllib {MTL_NAME}", f"usemtl {MATERIAL}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=np.float32)]
    lines += [f"vt {u:.9g} {1.0 - v:.9g}" for u, v in np.asarray(uv, dtype=np.float64)]
    lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in np.asarray(faces) + 1]
    path.write_text("\n".join(lines) + "\n")
    write_mtl(path.parent / MTL_NAME, texture_name)
    logger.info("Wrote %s (%d vertices, %d faces)", path, len(vertices), len(faces))


def write_mtl(path: str | Path, texture_name: str) -> None:
    Path(path).write_text(
        f"newmtl {MATERIAL}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {texture_name}\n"
    )


def read_obj(path: str | Path) -> ObjMesh:
    """Read an OBJ written by ``write_obj`` (triangles, matching v and vt indices)."""
    path = Path(path)
    if not path.is_file():
        raise MeshFileError(f"OBJ file not found: {path}")
    vertices: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    mtllib: str | None = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif tag == "vt":
                u, v = float(parts[1]), float(parts[2])
                uvs.append([u, 1.0 - v])
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshFileError(f"{path}:{lineno}: only triangles are supported")
                face = []
                for corner in parts[1:]:
                    v_idx, _, vt_idx = corner.partition("/")
                    if vt_idx and vt_idx.split("/")[0] != v_idx:
                        raise MeshFileError(
                            f"{path}:{lineno}: vertex and texture indices differ ({corner})"
                        )
                    face.append(int(v_idx) - 1)
                faces.append(face)
            elif tag == "mtllib":
                mtllib = parts[1]
        except (ValueError, IndexError) as e:
            raise MeshFileError(f"{path}:{lineno}: malformed record {line!r}") from e
    if len(uvs) != len(vertices):
        raise MeshFileError(f"{path}: {len(vertices)} vertices but {len(uvs)} texture coordinates")
    mesh = ObjMesh(
        vertices=np.array(vertices, dtype=np.float64).reshape(-1, 3),
        uv=np.array(uvs, dtype=np.float64).reshape(-1, 2),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
    )
    if mesh.faces.size and (mesh.faces.min() < 0 or mesh.faces.max() >= len(mesh.vertices)):
        raise MeshFileError(f"{path}: face index out of range")
    if mtllib is not None:
        mesh.texture_path = _texture_from_mtl(path.parent / mtllib)
    logger.debug("Read %s (%d vertices, %d faces)", path, len(mesh.vertices), len(mesh.faces))
    return mesh


def _texture_from_mtl(path: Path) -> Path | None:
    if not path.is_file():
        return None
    for line in path.read_text().splitlines():
        parts = line.split(maxsplit=1)
        if len(parts) == 2 and parts[0] == "map_Kd":
            return path.parent / parts[1].strip()
    return None


def to_uint8(image: Tensor) -> npt.NDArray[np.uint8]:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(image: Tensor) -> Tensor:
    """Snap an image to the 8-bit grid it would have after a PNG round trip."""
    return to_uint8(image).astype(np.float64) / 255.0


def save_png(path: str | Path, image: Tensor) -> None:
    """Save an H x W x 3 image in [0, 1] as 8-bit RGB."""
    Image.fromarray(to_uint8(image)).save(path)


def load_png(path: str | Path) -> Tensor:
    """Load an image as H x W x 3 floats in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path: str | Path, mask: npt.NDArray[np.bool_]) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_mask(path: str | Path) -> npt.NDArray[np.bool_]:
    """Load a silhouette; gray values >= 128 are foreground."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) >= MASK_THRESHOLD


def write_trace(path: str | Path, trace: list[TraceRow]) -> None:
    frame = pd.DataFrame([row.to_dict() for row in trace], columns=TRACE_COLUMNS)
    frame.to_csv(path, index=False)


def read_trace(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path)


def write_table(path: str | Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False)
    logger.info("Wrote %s (%d rows)", path, len(frame))


def _finite_or_null(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _finite_or_null(item) for key, item in value.items()}
    if isinstance(value, list | tuple):
        return [_finite_or_null(item) for item in value]
    return value


def write_json(path: str | Path, data: dict) -> None:
    """Write data as indented JSON; NaN and infinite floats become null."""
    text = json.dumps(_finite_or_null(data), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_truth(path: str | Path, z: Tensor, pose: CameraPose, init_pose: CameraPose) -> None:
    save_tensors(path, {"z": z, "pose": pose.to_vector(), "init_pose": init_pose.to_vector()})


def read_truth(path: str | Path) -> tuple[Tensor, CameraPose, CameraPose]:
    """(z, true pose, initial pose) from a truth.miv1 file (32-bit on disk)."""
    tensors = load_tensors(path)
    return (
        tensors["z"],
        CameraPose.from_vector(tensors["pose"]),
        CameraPose.from_vector(tensors["init_pose"]),
    )
