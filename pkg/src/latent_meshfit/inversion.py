"""Inversion driver: composed objective, Adam update and the multi-stage schedule."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from latent_meshfit.camera import (
    CameraError,
    CameraPose,
    project_backward,
    project_weak_perspective,
)
from latent_meshfit.decoder import Decoder
from latent_meshfit.geometry import (
    GeometryError,
    Mesh,
    MeshTopology,
    apply_deformation,
    smoothness_loss_and_grad,
)
from latent_meshfit.losses import (
    LossError,
    chamfer_mask_loss_and_grad,
    feature_chamfer_texture_loss_and_grad,
    l1_texture_loss_and_grad,
    latent_reg_and_grad,
    pixel_chamfer_texture_loss_and_grad,
)
from latent_meshfit.models import (
    AdamMoments,
    InversionConfig,
    InversionState,
    Target,
    TextureLoss,
    TraceRow,
)
from latent_meshfit.render import RenderError, RenderOutput, mask_to_points, rasterize
from latent_meshfit.tensorcore import Rng, Tensor

logger = logging.getLogger(__name__)

# Rng child keys
_INIT_KEY = 0
_SAMPLE_KEY = 1
_EVAL_KEY = 2


class InversionAbort(Exception):
    """Numerical abort during inversion, with the stage and iteration it happened at."""

    def __init__(self, message: str, stage: int | None = None, iteration: int | None = None):
        self.stage = stage
        self.iteration = iteration
        if stage is not None:
            message = f"stage {stage}, iteration {iteration}: {message}"
        super().__init__(message)


@dataclass
class ObjectiveResult:
    """Weighted objective, its gradients and the unweighted terms."""

    total: float
    grad_z: Tensor
    grad_pose: Tensor  # (s, tx, ty, qw, qx, qy, qz)
    l_pct: float = 0.0
    l_fct: float = 0.0
    l_cm: float = 0.0
    l_smooth: float = 0.0
    l_z: float = 0.0
    render: RenderOutput | None = None

    def terms(self) -> dict[str, float]:
        return {
            "l_pct": self.l_pct,
            "l_fct": self.l_fct,
            "l_cm": self.l_cm,
            "l_smooth": self.l_smooth,
            "l_z": self.l_z,
        }


def _needs_render(cfg: InversionConfig) -> bool:
    w = cfg.weights
    if cfg.texture_loss is TextureLoss.L1:
        return w.w_pct > 0
    return w.w_pct > 0 or w.w_fct > 0


def objective(
    z: Tensor,
    pose: CameraPose,
    target: Target,
    cfg: InversionConfig,
    decoder: Decoder,
    topology: MeshTopology,
    rng: Rng | None = None,
    frozen: RenderOutput | None = None,
    mask_points: Tensor | None = None,
) -> ObjectiveResult:
    """w_pct*L_pCT + w_fct*L_fCT + w_cm*L_CM + w_smooth*L_smooth + w_z*L_z and its gradients.

    Geometry terms reach z through the deformation branch and the camera
    through the projection; texture terms reach z through the texel weights
    and the texture branch. Terms with zero weight are not evaluated.

    Args:
        rng: Pixel subset stream for L_pCT; None uses every foreground pixel
        frozen: Rasterization to reuse (coverage and texel weights held fixed);
            the image is recomposed from the current texture
        mask_points: Precomputed target foreground pixel centres
    """
    w = cfg.weights
    out = decoder.decode(z)
    vertices = apply_deformation(out.deformation, topology)
    grad_vertices = np.zeros_like(vertices)
    grad_pose = np.zeros(7)
    grad_texture = None
    result = ObjectiveResult(total=0.0, grad_z=np.zeros_like(z), grad_pose=grad_pose)

    if w.w_cm > 0:
        if mask_points is None:
            mask_points = mask_to_points(target.mask)
        projected, _ = project_weak_perspective(pose, vertices)
        result.l_cm, grad_proj = chamfer_mask_loss_and_grad(projected, mask_points)
        g_v, g_pose = project_backward(pose, vertices, w.w_cm * grad_proj)
        grad_vertices += g_v
        grad_pose += g_pose

    if w.w_smooth > 0:
        result.l_smooth, g_v = smoothness_loss_and_grad(
            vertices, topology.faces, topology.adjacency
        )
        grad_vertices += w.w_smooth * g_v

    if _needs_render(cfg):
        if frozen is None:
            render = rasterize(
                vertices,
                topology.faces,
                topology.uv,
                out.texture,
                pose,
                resolution=target.resolution,
                background=cfg.background,
            )
            image = render.image
        else:
            render = frozen
            image = frozen.texel_weights.compose(out.texture, cfg.background)
        if not render.mask.any():
            raise InversionAbort("rendered mask is empty; the camera lost the object")
        result.render = render
        grad_image = np.zeros_like(image)

        if cfg.texture_loss is TextureLoss.L1:
            result.l_pct, g_img = l1_texture_loss_and_grad(image, target.image)
            grad_image += w.w_pct * g_img
        else:
            params = cfg.tex_params
            if cfg.texture_loss is TextureLoss.CHAMFER_NO_POSITIONS:
                params = replace(params, ignore_positions=True)
            if w.w_pct > 0:
                n_sample = cfg.n_sample if rng is not None else None
                result.l_pct, g_img = pixel_chamfer_texture_loss_and_grad(
                    image, render.mask, target.image, target.mask, params, n_sample, rng
                )
                grad_image += w.w_pct * g_img
            if w.w_fct > 0:
                result.l_fct, g_img = feature_chamfer_texture_loss_and_grad(
                    image, render.mask, target.image, target.mask, params
                )
                grad_image += w.w_fct * g_img
        grad_texture = render.texel_weights.backward(grad_image)

    grad_deformation = grad_vertices.reshape(out.deformation.shape)
    grad_z = decoder.backward(out, grad_deformation, grad_texture)

    if w.w_z > 0:
        result.l_z, g_z = latent_reg_and_grad(z)
        grad_z = grad_z + w.w_z * g_z

    # l_pct holds the L1 pixel term when texture_loss is l1
    result.total = float(
        w.w_pct * result.l_pct
        + w.w_fct * result.l_fct
        + w.w_cm * result.l_cm
        + w.w_smooth * result.l_smooth
        + w.w_z * result.l_z
    )
    result.grad_z = grad_z
    finite = np.isfinite(result.total) and np.all(np.isfinite(grad_z))
    if not (finite and np.all(np.isfinite(grad_pose))):
        raise InversionAbort("objective or gradient is not finite")
    return result


def adam_step(
    param: Tensor,
    grad: Tensor,
    moments: AdamMoments,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float = 1e-8,
) -> tuple[Tensor, AdamMoments]:
    """One bias-corrected Adam update.

    Returns:
        Tuple of (updated parameter, updated moments); lr=0 returns param as is
    """
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * grad
    v = beta2 * moments.v + (1.0 - beta2) * (grad * grad)
    updated = AdamMoments(m=m, v=v, t=t)
    if lr == 0:
        return param, updated
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), updated


def step_state(
    state: InversionState,
    grad_z: Tensor,
    grad_pose: Tensor,
    lr_z: float,
    lr_cam: float,
    cfg: InversionConfig,
) -> None:
    """Apply Adam to the z and camera blocks of state at their own learning rates."""
    state.z, state.z_moments = adam_step(
        state.z, grad_z, state.z_moments, lr_z, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    pose_vec, state.cam_moments = adam_step(
        state.pose.to_vector(),
        grad_pose,
        state.cam_moments,
        lr_cam,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    )
    if lr_cam != 0:
        state.pose = CameraPose.from_vector(pose_vec)
    state.step += 1


@dataclass
class InversionResult:
    """Best iterate of a run, its mesh and the full trace."""

    z: Tensor
    pose: CameraPose
    mesh: Mesh
    trace: list[TraceRow] = field(default_factory=list)
    best_total: float = float("inf")
    best_step: int = 0
    best_terms: dict[str, float] = field(default_factory=dict)


def _draws_every_pixel(cfg: InversionConfig, render: RenderOutput | None, target: Target) -> bool:
    """True when the pixel texture term takes every foreground pixel whatever the rng."""
    if render is None or cfg.texture_loss is TextureLoss.L1 or cfg.weights.w_pct == 0:
        return True
    return cfg.n_sample >= max(int(render.mask.sum()), int(target.mask.sum()))


def _copy_pose(pose: CameraPose) -> CameraPose:
    return CameraPose(scale=pose.scale, translation=pose.translation.copy(), quat=pose.quat.copy())


def invert(
    target: Target,
    cfg: InversionConfig,
    decoder: Decoder,
    topology: MeshTopology,
    z0: Tensor | None = None,
    on_step: Callable[[TraceRow], None] | None = None,
) -> InversionResult:
    """Jointly fit z and the camera to the target with the staged Adam schedule.

    Each iteration evaluates the objective with a fresh pixel subset (or the
    fixed evaluation subset when resampling is off), records a trace row and
    takes one Adam step. The returned iterate is the one with the lowest
    objective under the fixed evaluation subset.
    """
    cfg.validate()
    target.validate()
    rng = Rng(cfg.seed)
    if z0 is None:
        z0 = rng.child(_INIT_KEY).normal(decoder.dims.latent_dim)
    mask_points = mask_to_points(target.mask)
    state = InversionState.initial(np.asarray(z0, dtype=np.float64), _copy_pose(target.init_pose))

    def run_objective(
        stage: int, iteration: int, sample_rng: Rng, frozen: RenderOutput | None = None
    ) -> ObjectiveResult:
        try:
            return objective(
                state.z,
                state.pose,
                target,
                cfg,
                decoder,
                topology,
                rng=sample_rng,
                frozen=frozen,
                mask_points=mask_points,
            )
        except InversionAbort as e:
            raise InversionAbort(str(e), stage, iteration) from e
        except (LossError, RenderError, CameraError, GeometryError) as e:
            raise InversionAbort(str(e), stage, iteration) from e

    best_z = state.z.copy()
    best_pose = _copy_pose(state.pose)
    best_total = float("inf")
    best_step = 0
    best_terms: dict[str, float] = {}

    def consider(evaluated: ObjectiveResult) -> None:
        nonlocal best_z, best_pose, best_total, best_step, best_terms
        if evaluated.total < best_total:
            best_total = evaluated.total
            best_terms = evaluated.terms()
            best_z = state.z.copy()
            best_pose = _copy_pose(state.pose)
            best_step = state.step

    for stage, (lr_z, lr_cam, n_iters) in enumerate(
        zip(cfg.stage_lr_z, cfg.stage_lr_cam, cfg.stage_iters, strict=True)
    ):
        if cfg.reset_moments:
            state.reset_moments()
        state.stage = stage
        logger.info(
            "Stage %d: %d iterations, lr_z=%g lr_cam=%g", stage, n_iters, lr_z, lr_cam
        )
        for iteration in range(n_iters):
            if cfg.resample_points:
                result = run_objective(stage, iteration, rng.child(_SAMPLE_KEY, state.step))
                if _draws_every_pixel(cfg, result.render, target):
                    evaluated = result
                else:
                    evaluated = run_objective(
                        stage, iteration, rng.child(_EVAL_KEY), frozen=result.render
                    )
            else:
                result = run_objective(stage, iteration, rng.child(_EVAL_KEY))
                evaluated = result
            consider(evaluated)
            row = TraceRow(
                stage=stage,
                iteration=iteration,
                total=result.total,
                eval_total=evaluated.total,
                best_total=best_total,
                **result.terms(),
            )
            state.trace.append(row)
            logger.debug(
                "stage %d iter %d total=%.6g cm=%.4g pct=%.4g fct=%.4g",
                stage,
                iteration,
                result.total,
                result.l_cm,
                result.l_pct,
                result.l_fct,
            )
            if on_step is not None:
                on_step(row)
            step_state(state, result.grad_z, result.grad_pose, lr_z, lr_cam, cfg)
            if not state.pose.scale > 0:
                raise InversionAbort("camera scale became non-positive", stage, iteration)
        if state.trace:
            logger.info("Stage %d done: best total %.6g", stage, best_total)

    # The iterate after the last step is a candidate too
    consider(run_objective(state.stage, -1, rng.child(_EVAL_KEY)))

    decoded = decoder.decode(best_z)
    mesh = Mesh(
        vertices=apply_deformation(decoded.deformation, topology),
        topology=topology,
        texture=decoded.texture,
    )
    logger.info("Inversion finished: best total %.6g at step %d", best_total, best_step)
    return InversionResult(
        z=best_z,
        pose=best_pose,
        mesh=mesh,
        trace=state.trace,
        best_total=best_total,
        best_step=best_step,
        best_terms=best_terms,
    )
