"""Run configuration: flat ``key = value`` files with dotted keys and ``--set`` overrides."""

import json
import logging
from pathlib import Path
from typing import Any

from latent_meshfit.camera import CameraPose
from latent_meshfit.decoder import DecoderDims
from latent_meshfit.models import ChamferTexParams, InversionConfig, LossWeights, TextureLoss

logger = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved"

# Every accepted key and its default; the default fixes the value type.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 1,
    "image": "",
    "mask": "",
    "output.dir": "out",
    "decoder.weights": "",
    "decoder.seed": 0,
    "decoder.latent_dim": 64,
    "decoder.hidden": 256,
    "decoder.grid_h": 32,
    "decoder.grid_w": 32,
    "decoder.tex_h": 64,
    "decoder.tex_w": 64,
    "decoder.n_freq": 4,
    "render.resolution": 128,
    "render.background": [0.5, 0.5, 0.5],
    "render.mesh": "",
    "render.texture": "",
    "render.output": "render.png",
    "camera.scale": 0.8,
    "camera.tx": 0.0,
    "camera.ty": 0.0,
    "camera.quat": [1.0, 0.0, 0.0, 0.0],
    "inversion.stage_lr_z": [1e-1, 5e-2, 1e-2, 5e-3],
    "inversion.stage_lr_cam": [1e-2, 5e-3, 1e-3, 5e-4],
    "inversion.stage_iters": [50, 50, 50, 50],
    "inversion.adam_beta1": 0.0,
    "inversion.adam_beta2": 0.99,
    "inversion.adam_eps": 1e-8,
    "inversion.n_sample": 8096,
    "inversion.texture_loss": "chamfer",
    "inversion.resample_points": True,
    "inversion.reset_moments": True,
    "inversion.novel_views": 12,
    "loss.w_pct": 1.0,
    "loss.w_fct": 0.05,
    "loss.w_cm": 10.0,
    "loss.w_smooth": 0.00005,
    "loss.w_z": 0.05,
    "loss.eps_s": 0.9,
    "loss.eps_a": 1.0,
    "loss.alpha": 1.0,
    "synthetic.rotation_deg": 5.0,
    "synthetic.scale_frac": 0.05,
    "synthetic.translation": 0.02,
    "synthetic.min_coverage": 0.05,
    "synthetic.max_tries": 100,
    "synthetic.scale_range": [0.6, 0.9],
    "synthetic.max_tilt_deg": 30.0,
    "suite.n_targets": 10,
    "suite.n_points": 4096,
    "sensitivity.n_shapes": 100,
    "sensitivity.n_points": 4096,
    "sensitivity.eta_min_exp": -6,
    "sensitivity.eta_max_exp": -1,
    "sensitivity.points_per_decade": 3,
    "eps_sweep.values": [0.999, 0.99, 0.98, 0.95, 0.9],
    "ablation.texture_losses": ["chamfer", "l1", "chamfer_no_positions"],
    "ablation.cameras": ["fine-tuned", "fixed"],
    "batch.dir": "",
    "grad_check.n_configs": 10,
    "grad_check.eps": 1e-6,
    "grad_check.rel_tol": 1e-4,
    "grad_check.composed_rel_tol": 1e-3,
    "grad_check.n_coords": 24,
    "grad_check.latent_dim": 8,
    "grad_check.grid": 9,
    "grad_check.tex": 8,
    "grad_check.resolution": 32,
    "grad_check.n_points": 16,
}

PATH_KEYS = ("image", "mask", "decoder.weights", "render.mesh", "render.texture", "batch.dir")


class ConfigError(Exception):
    """Configuration file or override error."""

    pass


def parse_value(raw: str) -> Any:
    """JSON literal when it parses as one, otherwise the bare string."""
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(key: str, value: Any) -> Any:
    """Check value against the type of the key's default."""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        item_type = type(default[0]) if default else None
        if item_type is float:
            if not all(isinstance(v, int | float) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{key} expects a list of numbers, got {value!r}")
            return [float(v) for v in value]
        if item_type is int:
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{key} expects a list of integers, got {value!r}")
            return list(value)
        if item_type is str:
            return [str(v) for v in value]
        return list(value)
    return str(value)


class RunConfig:
    """Resolved settings for one command.

    Precedence: built-in defaults < config file < ``--set`` overrides < dedicated flags.
    Relative paths resolve against the directory of the config file they came from.
    """

    def __init__(self, base_dir: Path | None = None):
        self._values: dict[str, Any] = {k: _copy(v) for k, v in DEFAULTS.items()}
        self.base_dir = base_dir or Path.cwd()
        self.source: Path | None = None

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "RunConfig":
        config = cls(base_dir=base_dir)
        config.update_from_text(text)
        return config

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        """Read a config file; errors name the file and line."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        config = cls(base_dir=path.resolve().parent)
        config.source = path
        config.update_from_text(path.read_text(), origin=str(path))
        logger.debug("Loaded config from %s", path)
        return config

    def update_from_text(self, text: str, origin: str = "<text>") -> None:
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = stripped.split("=", 1)
            try:
                self.set(key.strip(), parse_value(raw))
            except ConfigError as e:
                raise ConfigError(f"{origin}:{lineno}: {e}") from e

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        self._values[key] = _coerce(key, value)

    def apply_overrides(self, pairs: list[str] | tuple[str, ...]) -> None:
        """Apply ``key=value`` strings from repeated ``--set`` flags."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, raw = pair.split("=", 1)
            self.set(key.strip(), parse_value(raw))
            logger.debug("Override %s = %r", key.strip(), self._values[key.strip()])

    def __getitem__(self, key: str) -> Any:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        return self._values[key]

    def path(self, key: str) -> Path | None:
        """Path value of key resolved against base_dir, or None when unset."""
        value = self[key]
        if not value:
            return None
        path = Path(value).expanduser()
        return path if path.is_absolute() else self.base_dir / path

    def require_path(self, key: str) -> Path:
        path = self.path(key)
        if path is None:
            raise ConfigError(f"{key} is required")
        if not path.exists():
            raise ConfigError(f"{key} does not exist: {path}")
        return path

    def validate(self) -> None:
        """Check that every referenced path exists and the typed sections are consistent."""
        for key in PATH_KEYS:
            path = self.path(key)
            if path is not None and not path.exists():
                raise ConfigError(f"{key} does not exist: {path}")
        try:
            self.inversion_config().validate()
            self.decoder_dims().validate()
            self.camera_pose().validate()
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(str(e)) from e
        if self["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        if self["inversion.novel_views"] < 0:
            raise ConfigError("inversion.novel_views must be >= 0")
        if len(self["render.background"]) != 3:
            raise ConfigError("render.background must have 3 entries")

    @property
    def output_dir(self) -> Path:
        value = Path(self["output.dir"]).expanduser()
        return value if value.is_absolute() else Path.cwd() / value

    @property
    def background(self) -> tuple[float, float, float]:
        r, g, b = self["render.background"]
        return (r, g, b)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            w_pct=self["loss.w_pct"],
            w_fct=self["loss.w_fct"],
            w_cm=self["loss.w_cm"],
            w_smooth=self["loss.w_smooth"],
            w_z=self["loss.w_z"],
        )

    def tex_params(self) -> ChamferTexParams:
        return ChamferTexParams(
            eps_s=self["loss.eps_s"], eps_a=self["loss.eps_a"], alpha=self["loss.alpha"]
        )

    def inversion_config(self) -> InversionConfig:
        try:
            texture_loss = TextureLoss(self["inversion.texture_loss"])
        except ValueError as e:
            raise ConfigError(
                f"inversion.texture_loss must be one of "
                f"{[t.value for t in TextureLoss]}, got {self['inversion.texture_loss']!r}"
            ) from e
        return InversionConfig(
            stage_lr_z=list(self["inversion.stage_lr_z"]),
            stage_lr_cam=list(self["inversion.stage_lr_cam"]),
            stage_iters=list(self["inversion.stage_iters"]),
            weights=self.loss_weights(),
            tex_params=self.tex_params(),
            adam_beta1=self["inversion.adam_beta1"],
            adam_beta2=self["inversion.adam_beta2"],
            adam_eps=self["inversion.adam_eps"],
            n_sample=self["inversion.n_sample"],
            seed=self["seed"],
            texture_loss=texture_loss,
            resample_points=self["inversion.resample_points"],
            reset_moments=self["inversion.reset_moments"],
            background=self.background,
        )

    def decoder_dims(self) -> DecoderDims:
        return DecoderDims(
            latent_dim=self["decoder.latent_dim"],
            hidden=self["decoder.hidden"],
            grid_h=self["decoder.grid_h"],
            grid_w=self["decoder.grid_w"],
            tex_h=self["decoder.tex_h"],
            tex_w=self["decoder.tex_w"],
            n_freq=self["decoder.n_freq"],
        )

    def camera_pose(self) -> CameraPose:
        return CameraPose.from_dict(
            {
                "scale": self["camera.scale"],
                "tx": self["camera.tx"],
                "ty": self["camera.ty"],
                "quat": self["camera.quat"],
            }
        )

    def to_flat(self) -> str:
        """Config text holding every key, in schema order, with paths made absolute."""
        lines = []
        for key in DEFAULTS:
            value = self._values[key]
            if key in PATH_KEYS and value:
                value = str(self.path(key))
            lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_NAME
        path.write_text(self.to_flat())
        return path


def _copy(value: Any) -> Any:
    return list(value) if isinstance(value, list) else value
