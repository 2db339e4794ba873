"""Command implementations: each takes a RunConfig and writes its artifacts into output.dir."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pandas as pd

from latent_meshfit.camera import CameraPose, orbit_pose
from latent_meshfit.config import ConfigError, RunConfig
from latent_meshfit.decoder import Decoder, DecoderError, init_decoder, load_decoder
from latent_meshfit.experiments import (
    GradCheckSettings,
    SyntheticSettings,
    eta_grid,
    foreground_texture_mae,
    make_synthetic,
    mask_iou,
    run_ablation,
    run_eps_sweep,
    run_grad_checks,
    run_sensitivity,
    run_synthetic_suite,
    sensitivity_cameras,
    summarize_sensitivity,
)
from latent_meshfit.files import (
    load_mask,
    load_png,
    read_obj,
    save_mask,
    save_png,
    write_json,
    write_obj,
    write_table,
    write_trace,
    write_truth,
)
from latent_meshfit.geometry import MeshTopology, build_sphere_template
from latent_meshfit.inversion import invert
from latent_meshfit.models import Target
from latent_meshfit.render import RenderOutput, rasterize
from latent_meshfit.tensorcore import TensorFileError

logger = logging.getLogger(__name__)

TARGET_CONFIG = "target.cfg"
# Keys copied into a synthetic bundle's target.cfg so invert sees the same decoder
_BUNDLE_KEYS = (
    "seed",
    "decoder.seed",
    "decoder.latent_dim",
    "decoder.hidden",
    "decoder.grid_h",
    "decoder.grid_w",
    "decoder.tex_h",
    "decoder.tex_w",
    "decoder.n_freq",
    "render.resolution",
    "render.background",
)


def load_model(cfg: RunConfig) -> tuple[Decoder, MeshTopology]:
    """Decoder from decoder.weights, or seeded from decoder.seed when unset."""
    dims = cfg.decoder_dims()
    weights_path = cfg.path("decoder.weights")
    try:
        if weights_path is not None:
            if not weights_path.is_file():
                raise ConfigError(f"decoder.weights does not exist: {weights_path}")
            weights = load_decoder(weights_path, dims)
            logger.info("Loaded decoder weights from %s", weights_path)
        else:
            weights = init_decoder(cfg["decoder.seed"], dims)
    except TensorFileError as e:
        raise ConfigError(f"cannot read decoder weights {weights_path}: {e}") from e
    except DecoderError as e:
        raise ConfigError(str(e)) from e
    return Decoder(weights), build_sphere_template(dims.grid_h, dims.grid_w)


def synthetic_settings(cfg: RunConfig) -> SyntheticSettings:
    low, high = cfg["synthetic.scale_range"]
    return SyntheticSettings(
        rotation_deg=cfg["synthetic.rotation_deg"],
        scale_frac=cfg["synthetic.scale_frac"],
        translation=cfg["synthetic.translation"],
        min_coverage=cfg["synthetic.min_coverage"],
        max_tries=cfg["synthetic.max_tries"],
        scale_range=(low, high),
        max_tilt_deg=cfg["synthetic.max_tilt_deg"],
    )


def grad_check_settings(cfg: RunConfig) -> GradCheckSettings:
    return GradCheckSettings(
        n_configs=cfg["grad_check.n_configs"],
        eps=cfg["grad_check.eps"],
        rel_tol=cfg["grad_check.rel_tol"],
        composed_rel_tol=cfg["grad_check.composed_rel_tol"],
        n_coords=cfg["grad_check.n_coords"],
        latent_dim=cfg["grad_check.latent_dim"],
        grid=cfg["grad_check.grid"],
        tex=cfg["grad_check.tex"],
        resolution=cfg["grad_check.resolution"],
        n_points=cfg["grad_check.n_points"],
    )


def load_target(cfg: RunConfig) -> Target:
    """Input image, silhouette and initial camera named by the config."""
    image_path = cfg.require_path("image")
    mask_path = cfg.require_path("mask")
    try:
        image = load_png(image_path)
        mask = load_mask(mask_path)
    except OSError as e:
        raise ConfigError(f"cannot read target images: {e}") from e
    target = Target(image=image, mask=mask, init_pose=cfg.camera_pose())
    try:
        target.validate()
    except ValueError as e:
        raise ConfigError(f"{image_path}: {e}") from e
    if target.resolution != cfg["render.resolution"]:
        raise ConfigError(
            f"target is {target.resolution} x {target.resolution} "
            f"but render.resolution is {cfg['render.resolution']}"
        )
    return target


def novel_azimuths(n_views: int) -> list[float]:
    """Evenly spaced azimuths in degrees, starting at 0."""
    return [360.0 * k / n_views for k in range(n_views)]


def render_mesh_file(
    mesh_path: Path,
    texture_path: Path,
    pose: CameraPose,
    resolution: int,
    background: tuple[float, float, float],
) -> RenderOutput:
    """Rasterize an exported OBJ with the given texture PNG."""
    mesh = read_obj(mesh_path)
    texture = load_png(texture_path)
    return rasterize(mesh.vertices, mesh.faces, mesh.uv, texture, pose, resolution, background)


def _prepare(cfg: RunConfig) -> Path:
    cfg.validate()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


def cmd_invert(cfg: RunConfig) -> dict:
    """Invert one target; writes the mesh, renders, trace and summary."""
    out = _prepare(cfg)
    decoder, topology = load_model(cfg)
    target = load_target(cfg)
    resolution = target.resolution
    background = cfg.background

    result = invert(target, cfg.inversion_config(), decoder, topology)

    mesh_path = out / "mesh.obj"
    texture_path = out / "texture.png"
    write_obj(mesh_path, result.mesh.vertices, topology.uv, topology.faces, texture_path.name)
    save_png(texture_path, result.mesh.texture)

    # Renders go through the exported files so `render` reproduces them
    recon = render_mesh_file(mesh_path, texture_path, result.pose, resolution, background)
    save_png(out / "recon.png", recon.image)
    for k, azimuth in enumerate(novel_azimuths(cfg["inversion.novel_views"])):
        view = render_mesh_file(
            mesh_path, texture_path, orbit_pose(result.pose, azimuth), resolution, background
        )
        save_png(out / f"novel_{k:02d}.png", view.image)

    write_trace(out / "trace.csv", result.trace)
    summary = {
        "iou": mask_iou(recon.mask, target.mask),
        "tex_mae": foreground_texture_mae(recon.image, recon.mask, target.image, target.mask),
        "best_total": result.best_total,
        "best_step": result.best_step,
        "final_losses": result.best_terms,
        "steps": len(result.trace),
        "pose": result.pose.to_dict(),
        "z": [float(v) for v in result.z],
    }
    write_json(out / "summary.json", summary)
    logger.info("Inversion written to %s (IoU %.3f)", out, summary["iou"])
    return summary


def cmd_make_synthetic(cfg: RunConfig) -> dict:
    """Write a synthetic target bundle ready for ``invert --config target.cfg``."""
    out = _prepare(cfg)
    decoder, topology = load_model(cfg)
    synthetic = make_synthetic(
        decoder,
        topology,
        cfg["seed"],
        cfg["render.resolution"],
        synthetic_settings(cfg),
        cfg.background,
    )
    save_png(out / "image.png", synthetic.target.image)
    save_mask(out / "mask.png", synthetic.target.mask)
    write_truth(out / "truth.miv1", synthetic.z, synthetic.pose, synthetic.target.init_pose)
    truth = synthetic.truth_dict()
    write_json(out / "truth.json", truth)

    lines = ['image = "image.png"', 'mask = "mask.png"']
    weights_path = cfg.path("decoder.weights")
    if weights_path is not None:
        lines.append(f"decoder.weights = {json.dumps(str(weights_path.resolve()))}")
    lines += [f"{key} = {json.dumps(cfg[key])}" for key in _BUNDLE_KEYS]
    lines += [
        f"camera.{name} = {json.dumps(value)}"
        for name, value in synthetic.target.init_pose.to_dict().items()
    ]
    (out / TARGET_CONFIG).write_text("\n".join(lines) + "\n")
    logger.info("Synthetic target written to %s (coverage %.3f)", out, synthetic.coverage)
    return truth


def cmd_render(cfg: RunConfig, identity: bool = False) -> Path:
    """Render render.mesh with render.texture (or the texture its MTL names)."""
    out = _prepare(cfg)
    mesh_path = cfg.require_path("render.mesh")
    texture_path = cfg.path("render.texture")
    if texture_path is None:
        texture_path = read_obj(mesh_path).texture_path
    if texture_path is None or not texture_path.is_file():
        raise ConfigError(f"no texture for {mesh_path}; set render.texture")
    pose = CameraPose.identity() if identity else cfg.camera_pose()
    render = render_mesh_file(
        mesh_path, texture_path, pose, cfg["render.resolution"], cfg.background
    )
    path = out / cfg["render.output"]
    save_png(path, render.image)
    logger.info("Rendered %s to %s", mesh_path, path)
    return path


def cmd_sensitivity(cfg: RunConfig, progress: bool = False) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Mask-loss sensitivity rows and per-decade slope summary."""
    out = _prepare(cfg)
    decoder, topology = load_model(cfg)
    min_exp, max_exp = cfg["sensitivity.eta_min_exp"], cfg["sensitivity.eta_max_exp"]
    try:
        etas = eta_grid(min_exp, max_exp, cfg["sensitivity.points_per_decade"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    frame = run_sensitivity(
        decoder,
        topology,
        cfg["sensitivity.n_shapes"],
        etas,
        cfg["sensitivity.n_points"],
        cfg["render.resolution"],
        cfg["seed"],
        synthetic_settings(cfg),
        progress=progress,
    )
    summary = summarize_sensitivity(frame, min_exp, max_exp)
    write_table(out / "sensitivity.csv", frame)
    write_table(out / "sensitivity_summary.csv", summary)
    write_table(
        out / "sensitivity_cameras.csv",
        sensitivity_cameras(cfg["sensitivity.n_shapes"], cfg["seed"], synthetic_settings(cfg)),
    )
    return frame, summary


def cmd_suite(cfg: RunConfig, progress: bool = False) -> pd.DataFrame:
    """Synthetic recovery suite: one row of recovery metrics per target."""
    out = _prepare(cfg)
    decoder, topology = load_model(cfg)
    frame = run_synthetic_suite(
        decoder,
        topology,
        cfg.inversion_config(),
        cfg["suite.n_targets"],
        cfg["seed"],
        cfg["render.resolution"],
        synthetic_settings(cfg),
        n_points=cfg["suite.n_points"],
        progress=progress,
    )
    write_table(out / "suite.csv", frame)
    return frame


def cmd_eps_sweep(cfg: RunConfig, progress: bool = False) -> pd.DataFrame:
    out = _prepare(cfg)
    decoder, topology = load_model(cfg)
    frame = run_eps_sweep(
        decoder,
        topology,
        cfg.inversion_config(),
        cfg["suite.n_targets"],
        cfg["seed"],
        cfg["render.resolution"],
        synthetic_settings(cfg),
        eps_values=cfg["eps_sweep.values"],
        n_points=cfg["suite.n_points"],
        progress=progress,
    )
    write_table(out / "eps_sweep.csv", frame)
    return frame


def cmd_ablation(cfg: RunConfig, progress: bool = False) -> pd.DataFrame:
    out = _prepare(cfg)
    decoder, topology = load_model(cfg)
    try:
        frame = run_ablation(
            decoder,
            topology,
            cfg.inversion_config(),
            cfg["suite.n_targets"],
            cfg["seed"],
            cfg["render.resolution"],
            synthetic_settings(cfg),
            texture_losses=cfg["ablation.texture_losses"],
            cameras=cfg["ablation.cameras"],
            n_points=cfg["suite.n_points"],
            progress=progress,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    write_table(out / "ablation.csv", frame)
    return frame


def cmd_grad_check(cfg: RunConfig) -> pd.DataFrame:
    out = _prepare(cfg)
    frame = run_grad_checks(cfg["seed"], grad_check_settings(cfg))
    write_table(out / "grad_check.csv", frame)
    n_failed = int((~frame["passed"]).sum())
    if n_failed:
        logger.error("%d of %d gradient checks failed", n_failed, len(frame))
    return frame

