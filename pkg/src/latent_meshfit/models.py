"""Data models shared across latent-meshfit modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum

import numpy as np

from latent_meshfit.camera import CameraPose
from latent_meshfit.tensorcore import Tensor


class TextureLoss(Enum):
    """Appearance term used by the inversion objective."""

    CHAMFER = "chamfer"
    L1 = "l1"
    CHAMFER_NO_POSITIONS = "chamfer_no_positions"  # spatial factor fixed to 1


@dataclass(frozen=True)
class ChamferTexParams:
    """Residuals and exponent of the Chamfer texture distance."""

    eps_s: float = 0.9
    eps_a: float = 1.0
    alpha: float = 1.0
    ignore_positions: bool = False

    def validate(self) -> None:
        if not 0.0 < self.eps_s < 1.0:
            raise ValueError(f"eps_s must lie in (0, 1), got {self.eps_s}")
        if self.eps_a < 0.0:
            raise ValueError(f"eps_a must be >= 0, got {self.eps_a}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    def to_dict(self) -> dict:
        return {"eps_s": self.eps_s, "eps_a": self.eps_a, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, data: dict) -> ChamferTexParams:
        return cls(
            eps_s=data.get("eps_s", 0.9),
            eps_a=data.get("eps_a", 1.0),
            alpha=data.get("alpha", 1.0),
        )


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five objective terms."""

    w_pct: float = 1.0
    w_fct: float = 0.05
    w_cm: float = 10.0
    w_smooth: float = 0.00005
    w_z: float = 0.05

    def validate(self) -> None:
        for name, value in self.to_dict().items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def to_dict(self) -> dict:
        return {
            "w_pct": self.w_pct,
            "w_fct": self.w_fct,
            "w_cm": self.w_cm,
            "w_smooth": self.w_smooth,
            "w_z": self.w_z,
        }

    @classmethod
    def from_dict(cls, data: dict) -> LossWeights:
        defaults = cls()
        return cls(**{k: data.get(k, getattr(defaults, k)) for k in defaults.to_dict()})


@dataclass
class InversionConfig:
    """Multi-stage Adam schedule and objective settings for one inversion run."""

    stage_lr_z: list[float] = field(default_factory=lambda: [1e-1, 5e-2, 1e-2, 5e-3])
    stage_lr_cam: list[float] = field(default_factory=lambda: [1e-2, 5e-3, 1e-3, 5e-4])
    stage_iters: list[int] = field(default_factory=lambda: [50, 50, 50, 50])
    weights: LossWeights = field(default_factory=LossWeights)
    tex_params: ChamferTexParams = field(default_factory=ChamferTexParams)
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    n_sample: int = 8096
    seed: int = 0
    texture_loss: TextureLoss = TextureLoss.CHAMFER
    resample_points: bool = True  # re-draw texture point subsets every iteration
    reset_moments: bool = True  # fresh Adam moments at each stage boundary
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @property
    def n_stages(self) -> int:
        return len(self.stage_iters)

    @property
    def total_iters(self) -> int:
        return sum(self.stage_iters)

    def validate(self) -> None:
        n = len(self.stage_iters)
        if n < 1 or len(self.stage_lr_z) != n or len(self.stage_lr_cam) != n:
            raise ValueError("stage_lr_z, stage_lr_cam and stage_iters must share length >= 1")
        if any(lr <= 0 for lr in self.stage_lr_z):
            raise ValueError("latent learning rates must be > 0")
        # Zero camera rate holds the camera fixed
        if any(lr < 0 for lr in self.stage_lr_cam):
            raise ValueError("camera learning rates must be >= 0")
        if any(it < 0 for it in self.stage_iters):
            raise ValueError("stage iterations must be >= 0")
        if self.n_sample < 1:
            raise ValueError("n_sample must be >= 1")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.weights.validate()
        self.tex_params.validate()

    def to_dict(self) -> dict:
        return {
            "stage_lr_z": list(self.stage_lr_z),
            "stage_lr_cam": list(self.stage_lr_cam),
            "stage_iters": list(self.stage_iters),
            "weights": self.weights.to_dict(),
            "tex_params": self.tex_params.to_dict(),
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "n_sample": self.n_sample,
            "seed": self.seed,
            "texture_loss": self.texture_loss.value,
            "resample_points": self.resample_points,
            "reset_moments": self.reset_moments,
            "background": list(self.background),
        }


@dataclass
class AdamMoments:
    """First and second moment estimates for one optimization variable."""

    m: Tensor
    v: Tensor
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Tensor) -> AdamMoments:
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), t=0)


@dataclass
class TraceRow:
    """Loss terms recorded at one optimization step."""

    stage: int
    iteration: int
    total: float
    l_pct: float
    l_fct: float
    l_cm: float
    l_smooth: float
    l_z: float
    eval_total: float = float("nan")  # objective under the fixed evaluation sampling
    best_total: float = float("nan")  # best eval_total so far

    def to_dict(self) -> dict:
        """Columns written to trace.csv."""
        return {
            "stage": self.stage,
            "iter": self.iteration,
            "total": self.total,
            "l_pct": self.l_pct,
            "l_fct": self.l_fct,
            "l_cm": self.l_cm,
            "l_smooth": self.l_smooth,
            "l_z": self.l_z,
        }


@dataclass
class InversionState:
    """Current iterate of an inversion run and its optimizer bookkeeping."""

    z: Tensor
    pose: CameraPose
    z_moments: AdamMoments
    cam_moments: AdamMoments
    step: int = 0
    stage: int = 0
    trace: list[TraceRow] = field(default_factory=list)

    @classmethod
    def initial(cls, z: Tensor, pose: CameraPose) -> InversionState:
        return cls(
            z=z.copy(),
            pose=pose,
            z_moments=AdamMoments.zeros_like(z),
            cam_moments=AdamMoments.zeros_like(pose.to_vector()),
        )

    def reset_moments(self) -> None:
        self.z_moments = AdamMoments.zeros_like(self.z)
        self.cam_moments = AdamMoments.zeros_like(self.pose.to_vector())


@dataclass
class Target:
    """Observation to invert: input image, silhouette and initial camera."""

    image: Tensor  # R x R x 3 in [0, 1]
    mask: np.ndarray  # R x R booleans
    init_pose: CameraPose

    @property
    def resolution(self) -> int:
        return int(self.mask.shape[0])

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be R x R x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} resolutions differ"
            )
        if self.mask.shape[0] != self.mask.shape[1]:
            raise ValueError(f"target must be square, got {self.mask.shape}")
        if not self.mask.any():
            raise ValueError("target mask is empty")


class JobStatus(Enum):
    """Batch job states."""

    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class BatchJob:
    """One inversion in a batch run."""

    id: str
    config_path: str
    output_dir: str
    status: JobStatus = JobStatus.QUEUED
    iou: float | None = None
    error: str | None = None
    started_at: datetime | None = None
    completed_at: datetime | None = None

    @property
    def duration(self) -> float | None:
        """Wall-clock seconds, once finished."""
        if self.started_at is None or self.completed_at is None:
            return None
        return (self.completed_at - self.started_at).total_seconds()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "config_path": self.config_path,
            "output_dir": self.output_dir,
            "status": self.status.value,
            "iou": self.iou,
            "error": self.error,
            "duration": self.duration,
        }
