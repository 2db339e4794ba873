"""Entry point for the latent-meshfit command line."""

import logging
import sys
from collections.abc import Callable
from functools import wraps
from pathlib import Path
from typing import Any

import click

from latent_meshfit import __version__
from latent_meshfit.camera import CameraError
from latent_meshfit.config import ConfigError, RunConfig
from latent_meshfit.decoder import DecoderError
from latent_meshfit.files import MeshFileError
from latent_meshfit.geometry import GeometryError
from latent_meshfit.inversion import InversionAbort
from latent_meshfit.losses import LossError
from latent_meshfit.render import RenderError
from latent_meshfit.tensorcore import GradCheckError, TensorFileError

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

CONFIG_ERRORS = (ConfigError, MeshFileError, TensorFileError)
NUMERICAL_ERRORS = (
    InversionAbort,
    LossError,
    GradCheckError,
    RenderError,
    GeometryError,
    CameraError,
    DecoderError,
)


def setup_logging(verbose: bool) -> None:
    """Configure logging based on verbosity level."""
    if verbose:
        logging.basicConfig(
            level=logging.DEBUG,
            format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
            datefmt="%H:%M:%S",
        )
    else:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")


def build_config(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
) -> RunConfig:
    """Defaults < --config file < --set overrides < dedicated flags."""
    cfg = RunConfig.load(config) if config else RunConfig()
    cfg.apply_overrides(sets)
    if seed is not None:
        cfg.set("seed", seed)
    if workers is not None:
        cfg.set("workers", workers)
    if out is not None:
        cfg.set("output.dir", str(Path(out).resolve()))
    return cfg


def common_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Options shared by every command."""
    func = click.option("--out", "out", help="Output directory (output.dir)")(func)
    func = click.option("--workers", type=int, help="Concurrent workers")(func)
    func = click.option("--seed", type=int, help="Run seed")(func)
    func = click.option(
        "--set",
        "sets",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override a config key (repeatable)",
    )(func)
    func = click.option(
        "-c",
        "--config",
        type=click.Path(dir_okay=False),
        help="Config file (flat key = value)",
    )(func)
    return func


def handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Log a failure once and turn it into the command's exit code."""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except CONFIG_ERRORS as e:
            logger.error("%s", e)
            sys.exit(EXIT_CONFIG)
        except NUMERICAL_ERRORS as e:
            logger.error("%s: %s", type(e).__name__, e)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


@click.group(invoke_without_command=True)
@click.option("-v", "--verbose", is_flag=True, help="Enable debug output")
@click.option("--version", is_flag=True, help="Show version and exit")
@click.pass_context
def main(ctx: click.Context, verbose: bool, version: bool) -> None:
    """latent-meshfit - textured mesh from a single image by latent inversion.

    Every command reads an optional flat config file and writes its
    artifacts, plus the resolved config, into output.dir.

    Examples:

        latent-meshfit make-synthetic --seed 3 --out target

        latent-meshfit invert --config target/target.cfg --out fit

        latent-meshfit invert --batch targets/ --workers 4 --out fits

        latent-meshfit render --mesh fit/mesh.obj --identity --out view
    """
    if version:
        click.echo(f"latent-meshfit {__version__}")
        sys.exit(0)
    setup_logging(verbose)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@main.command()
@common_options
@click.option(
    "--batch",
    type=click.Path(file_okay=False),
    help="Invert every sub-directory holding a target.cfg",
)
@handle_errors
def invert(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
    batch: str | None,
) -> None:
    """Reconstruct a textured mesh from image + mask."""
    cfg = build_config(config, sets, seed, workers, out)
    if batch is None:
        from latent_meshfit.commands import cmd_invert

        summary = cmd_invert(cfg)
        click.echo(f"IoU {summary['iou']:.4f}  best_total {summary['best_total']:.6g}")
        return

    from latent_meshfit.batch import cmd_batch
    from latent_meshfit.models import JobStatus

    cfg.set("batch.dir", str(Path(batch).resolve()))
    # Jobs load their own target.cfg; flags still apply on top of it
    job_overrides = sets + ((f"seed={seed}",) if seed is not None else ())
    jobs = cmd_batch(cfg, job_overrides)
    n_failed = sum(job.status != JobStatus.COMPLETED for job in jobs)
    click.echo(f"{len(jobs) - n_failed} of {len(jobs)} targets inverted")


@main.command("make-synthetic")
@common_options
@handle_errors
def make_synthetic(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
) -> None:
    """Write a synthetic target bundle with known latent and camera."""
    from latent_meshfit.commands import cmd_make_synthetic

    cfg = build_config(config, sets, seed, workers, out)
    truth = cmd_make_synthetic(cfg)
    click.echo(f"coverage {truth['coverage']:.4f}  ->  {cfg.output_dir}")


@main.command()
@common_options
@click.option("--mesh", type=click.Path(dir_okay=False), help="OBJ to render (render.mesh)")
@click.option("--texture", type=click.Path(dir_okay=False), help="Texture PNG (render.texture)")
@click.option("--identity", is_flag=True, help="Render with the identity camera")
@handle_errors
def render(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
    mesh: str | None,
    texture: str | None,
    identity: bool,
) -> None:
    """Rasterize an exported mesh with a camera from the config."""
    from latent_meshfit.commands import cmd_render

    cfg = build_config(config, sets, seed, workers, out)
    if mesh is not None:
        cfg.set("render.mesh", str(Path(mesh).resolve()))
    if texture is not None:
        cfg.set("render.texture", str(Path(texture).resolve()))
    click.echo(str(cmd_render(cfg, identity=identity)))


@main.command()
@common_options
@click.option("--progress", is_flag=True, help="Show a progress bar")
@handle_errors
def sensitivity(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
    progress: bool,
) -> None:
    """Mask-loss sensitivity to vertex jitter, with per-decade slopes."""
    from latent_meshfit.commands import cmd_sensitivity

    cfg = build_config(config, sets, seed, workers, out)
    _, summary = cmd_sensitivity(cfg, progress=progress)
    click.echo(summary.to_string(index=False))


@main.command()
@common_options
@click.option("--progress", is_flag=True, help="Show a progress bar")
@handle_errors
def suite(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
    progress: bool,
) -> None:
    """Invert a seeded set of synthetic targets and score recovery."""
    from latent_meshfit.commands import cmd_suite

    cfg = build_config(config, sets, seed, workers, out)
    frame = cmd_suite(cfg, progress=progress)
    click.echo(f"mean IoU {frame['iou'].mean():.4f}  median cd3d {frame['cd3d'].median():.6g}")


@main.command("eps-sweep")
@common_options
@click.option("--progress", is_flag=True, help="Show a progress bar")
@handle_errors
def eps_sweep(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
    progress: bool,
) -> None:
    """Synthetic suite over the texture-loss spatial weight eps_s."""
    from latent_meshfit.commands import cmd_eps_sweep

    cfg = build_config(config, sets, seed, workers, out)
    click.echo(cmd_eps_sweep(cfg, progress=progress).to_string(index=False))


@main.command()
@common_options
@click.option("--progress", is_flag=True, help="Show a progress bar")
@handle_errors
def ablation(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
    progress: bool,
) -> None:
    """Synthetic suite over texture losses and camera fine-tuning."""
    from latent_meshfit.commands import cmd_ablation

    cfg = build_config(config, sets, seed, workers, out)
    click.echo(cmd_ablation(cfg, progress=progress).to_string(index=False))


@main.command("grad-check")
@common_options
@handle_errors
def grad_check(
    config: str | None,
    sets: tuple[str, ...],
    seed: int | None,
    workers: int | None,
    out: str | None,
) -> None:
    """Finite-difference checks of every analytic gradient."""
    from latent_meshfit.commands import cmd_grad_check

    cfg = build_config(config, sets, seed, workers, out)
    frame = cmd_grad_check(cfg)
    n_failed = int((~frame["passed"]).sum())
    click.echo(f"{len(frame) - n_failed} of {len(frame)} checks passed")
    if n_failed:
        sys.exit(EXIT_NUMERICAL)


if __name__ == "__main__":
    main()
