"""Pytest fixtures for latent-meshfit tests."""

from pathlib import Path

import pytest

from latent_meshfit.decoder import Decoder, DecoderDims, init_decoder
from latent_meshfit.experiments import SyntheticTarget, make_synthetic
from latent_meshfit.geometry import MeshTopology, build_sphere_template
from latent_meshfit.models import InversionConfig

SMALL_RESOLUTION = 32

# Config text for end-to-end runs that finish in seconds
SMALL_CONFIG = """\
decoder.latent_dim = 8
decoder.hidden = 32
decoder.grid_h = 9
decoder.grid_w = 9
decoder.tex_h = 8
decoder.tex_w = 8
decoder.n_freq = 3
render.resolution = 32
inversion.stage_lr_z = [0.1, 0.05]
inversion.stage_lr_cam = [0.01, 0.005]
inversion.stage_iters = [2, 2]
inversion.n_sample = 64
inversion.novel_views = 3
suite.n_targets = 1
suite.n_points = 128
sensitivity.n_shapes = 1
sensitivity.n_points = 128
sensitivity.eta_min_exp = -3
sensitivity.eta_max_exp = -1
sensitivity.points_per_decade = 1
grad_check.n_configs = 1
"""


@pytest.fixture
def small_dims() -> DecoderDims:
    """Provide decoder dimensions small enough for fast tests."""
    return DecoderDims(
        latent_dim=8, hidden=32, grid_h=9, grid_w=9, tex_h=8, tex_w=8, n_freq=3
    )


@pytest.fixture
def small_decoder(small_dims: DecoderDims) -> Decoder:
    """Provide a seeded decoder with small dimensions."""
    return Decoder(init_decoder(0, small_dims))


@pytest.fixture
def small_topology(small_dims: DecoderDims) -> MeshTopology:
    """Provide the sphere template matching small_dims."""
    return build_sphere_template(small_dims.grid_h, small_dims.grid_w)


@pytest.fixture
def small_synthetic(small_decoder: Decoder, small_topology: MeshTopology) -> SyntheticTarget:
    """Provide a synthetic 32 x 32 target with known latent and camera."""
    return make_synthetic(small_decoder, small_topology, seed=0, resolution=SMALL_RESOLUTION)


@pytest.fixture
def small_inversion_config() -> InversionConfig:
    """Provide a two-stage schedule with a handful of iterations."""
    return InversionConfig(
        stage_lr_z=[0.1, 0.05],
        stage_lr_cam=[0.01, 0.005],
        stage_iters=[3, 3],
        n_sample=64,
    )


@pytest.fixture
def small_config_file(tmp_path: Path) -> Path:
    """Provide a config file with small decoder, render and harness sizes."""
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def default_decoder() -> Decoder:
    """Provide the seeded decoder at its default dimensions."""
    return Decoder(init_decoder(0, DecoderDims()))


@pytest.fixture
def default_topology() -> MeshTopology:
    """Provide the sphere template matching the default decoder grid."""
    dims = DecoderDims()
    return build_sphere_template(dims.grid_h, dims.grid_w)
