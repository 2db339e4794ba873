"""Smooth deterministic mesh generator G(z) -> (deformation map, texture map).

z -> hidden(tanh) -> {half deformation grid, texture Fourier coefficients}.
Deformation rows of ``w_def`` are built from low-frequency UV functions at
initialization, so decoded surfaces are smooth; any externally trained weights
with matching shapes load the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from latent_meshfit.geometry import symmetrize, symmetrize_backward
from latent_meshfit.tensorcore import Rng, Tensor, load_tensors, save_tensors

logger = logging.getLogger(__name__)

DEFORMATION_BOUND = 0.3
WEIGHT_NAMES = ("w1", "b1", "w_def", "b_def", "w_tex", "b_tex", "fourier_freqs")


class DecoderError(Exception):
    """Decoder shape or weight error."""

    pass


@dataclass(frozen=True)
class DecoderDims:
    """Latent, hidden, deformation-grid and texture sizes."""

    latent_dim: int = 64
    hidden: int = 256
    grid_h: int = 32
    grid_w: int = 32
    tex_h: int = 64
    tex_w: int = 64
    n_freq: int = 4  # texture frequencies per UV axis

    @property
    def half_w(self) -> int:
        return (self.grid_w + 1) // 2

    @property
    def n_def(self) -> int:
        return self.grid_h * self.half_w * 3

    @property
    def n_basis(self) -> int:
        return 2 * self.n_freq * self.n_freq

    def validate(self) -> None:
        if min(self.latent_dim, self.hidden, self.n_freq) < 1:
            raise DecoderError(f"invalid decoder dims: {self}")
        if self.grid_h < 3 or self.grid_w < 3 or self.tex_h < 2 or self.tex_w < 2:
            raise DecoderError(f"grid must be >= 3 x 3 and texture >= 2 x 2: {self}")

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "w1": (self.hidden, self.latent_dim),
            "b1": (self.hidden,),
            "w_def": (self.n_def, self.hidden),
            "b_def": (self.n_def,),
            "w_tex": (self.n_basis * 3, self.hidden),
            "b_tex": (self.n_basis * 3,),
            "fourier_freqs": (self.n_basis // 2, 2),
        }


@dataclass(frozen=True)
class DecoderWeights:
    """Named decoder tensors; immutable during inversion."""

    dims: DecoderDims
    tensors: dict[str, Tensor]

    def __post_init__(self) -> None:
        expected = self.dims.expected_shapes()
        for name, shape in expected.items():
            if name not in self.tensors:
                raise DecoderError(f"missing decoder tensor: {name}")
            if self.tensors[name].shape != shape:
                raise DecoderError(
                    f"decoder tensor {name} has shape {self.tensors[name].shape}, expected {shape}"
                )
        for array in self.tensors.values():
            array.flags.writeable = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _deformation_basis(dims: DecoderDims) -> tuple[Tensor, Tensor]:
    """Low-frequency functions over the half grid, one block per channel.

    x uses sin(2 pi b u), which vanishes on the symmetry plane; y and z use
    cos(2 pi b u). Returns (basis n_def x 3*F^2, amplitude per column).
    """
    f = dims.n_freq
    v = np.arange(dims.grid_h) / (dims.grid_h - 1)
    u = np.arange(dims.half_w) / (dims.grid_w - 1)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    columns = []
    amps = []
    for channel in range(3):
        for a in range(f):
            for b in range(f):
                along_u = np.sin(2 * np.pi * b * uu) if channel == 0 else np.cos(2 * np.pi * b * uu)
                block = np.zeros((dims.grid_h, dims.half_w, 3))
                block[:, :, channel] = np.cos(np.pi * a * vv) * along_u
                columns.append(block.reshape(-1))
                amps.append(1.0 / (1.0 + a + b))
    return np.stack(columns, axis=1), np.array(amps)


def _texture_frequencies(dims: DecoderDims) -> Tensor:
    fu, fv = np.meshgrid(np.arange(dims.n_freq), np.arange(dims.n_freq), indexing="ij")
    return np.stack([fu.reshape(-1), fv.reshape(-1)], axis=1).astype(np.float64)


def texture_basis(freqs: Tensor, tex_h: int, tex_w: int) -> Tensor:
    """Fourier basis over texel UVs: (tex_h*tex_w) x 2K, cosines then sines."""
    u = np.arange(tex_w) / (tex_w - 1)
    v = np.arange(tex_h) / (tex_h - 1)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    phase = 2 * np.pi * (uu.reshape(-1, 1) * freqs[:, 0] + vv.reshape(-1, 1) * freqs[:, 1])
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def init_decoder(seed: int, dims: DecoderDims | None = None) -> DecoderWeights:
    """Gaussian weights scaled by 1/sqrt(fan-in), deterministic per seed."""
    dims = dims or DecoderDims()
    dims.validate()
    rng = Rng(seed)
    h = dims.hidden

    w1 = rng.normal((h, dims.latent_dim)) / np.sqrt(dims.latent_dim)
    b1 = 0.1 * rng.normal(h)

    basis, amps = _deformation_basis(dims)
    coeff = 0.8 * amps[:, None] * rng.normal((basis.shape[1], h)) / np.sqrt(h)
    w_def = basis @ coeff
    b_def = basis @ (0.3 * amps * rng.normal(basis.shape[1]))

    freqs = _texture_frequencies(dims)
    tex_amp = 1.0 / (1.0 + freqs.sum(axis=1))
    tex_amp = np.repeat(np.concatenate([tex_amp, tex_amp]), 3)
    w_tex = 1.5 * tex_amp[:, None] * rng.normal((dims.n_basis * 3, h)) / np.sqrt(h)
    b_tex = 0.5 * tex_amp * rng.normal(dims.n_basis * 3)

    logger.debug("Initialized decoder from seed %d with dims %s", seed, dims)
    return DecoderWeights(
        dims=dims,
        tensors={
            "w1": w1,
            "b1": b1,
            "w_def": w_def,
            "b_def": b_def,
            "w_tex": w_tex,
            "b_tex": b_tex,
            "fourier_freqs": freqs,
        },
    )


def save_decoder(path: str | Path, weights: DecoderWeights) -> None:
    save_tensors(path, {name: weights[name] for name in WEIGHT_NAMES})


def load_decoder(path: str | Path, dims: DecoderDims | None = None) -> DecoderWeights:
    """Load MIV1 decoder weights and check them against dims."""
    tensors = load_tensors(path)
    return DecoderWeights(dims=dims or DecoderDims(), tensors=tensors)


@dataclass(frozen=True)
class DecoderOutput:
    """Decoded maps plus the activations needed for backward."""

    deformation: Tensor  # grid_h x grid_w x 3
    texture: Tensor  # tex_h x tex_w x 3
    hidden: Tensor
    def_act: Tensor  # tanh of deformation logits


def _collapse_poles(deformation: Tensor) -> Tensor:
    """Give every vertex of a pole row the row-mean offset; poles sit on the symmetry plane."""
    out = deformation.copy()
    for row in (0, -1):
        out[row] = deformation[row].mean(axis=0)
        out[row, :, 0] = 0.0
    return out


def _collapse_poles_backward(grad: Tensor) -> Tensor:
    out = grad.copy()
    for row in (0, -1):
        out[row] = grad[row].mean(axis=0)
        out[row, :, 0] = 0.0
    return out


class Decoder:
    """G(z) with a forward cache and hand-chained backward."""

    def __init__(self, weights: DecoderWeights):
        self.weights = weights
        self.dims = weights.dims
        self._basis = texture_basis(weights["fourier_freqs"], self.dims.tex_h, self.dims.tex_w)

    def decode(self, z: Tensor) -> DecoderOutput:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dims.latent_dim,):
            raise DecoderError(f"latent code shape {z.shape} != ({self.dims.latent_dim},)")
        w = self.weights
        d = self.dims
        hidden = np.tanh(w["w1"] @ z + w["b1"])
        def_act = np.tanh(w["w_def"] @ hidden + w["b_def"])
        half = DEFORMATION_BOUND * def_act.reshape(d.grid_h, d.half_w, 3)
        deformation = _collapse_poles(symmetrize(half, d.grid_w))
        coef = (w["w_tex"] @ hidden + w["b_tex"]).reshape(d.n_basis, 3)
        texture = 1.0 / (1.0 + np.exp(-(self._basis @ coef)))
        texture = np.clip(texture, 0.0, 1.0).reshape(d.tex_h, d.tex_w, 3)
        return DecoderOutput(
            deformation=deformation, texture=texture, hidden=hidden, def_act=def_act
        )

    def backward(
        self, out: DecoderOutput, grad_deformation: Tensor | None, grad_texture: Tensor | None
    ) -> Tensor:
        """Gradient w.r.t. z of a scalar with the given map gradients."""
        w = self.weights
        d = self.dims
        grad_hidden = np.zeros(d.hidden)
        if grad_deformation is not None:
            grad_half = symmetrize_backward(_collapse_poles_backward(grad_deformation), d.grid_w)
            grad_logits = DEFORMATION_BOUND * grad_half.reshape(-1) * (1.0 - out.def_act**2)
            grad_hidden += w["w_def"].T @ grad_logits
        if grad_texture is not None:
            t = out.texture.reshape(-1, 3)
            grad_pre = grad_texture.reshape(-1, 3) * t * (1.0 - t)
            grad_coef = self._basis.T @ grad_pre
            grad_hidden += w["w_tex"].T @ grad_coef.reshape(-1)
        return w["w1"].T @ (grad_hidden * (1.0 - out.hidden**2))


def decode(z: Tensor, weights: DecoderWeights) -> tuple[Tensor, Tensor]:
    """S, T = G(z)."""
    out = Decoder(weights).decode(z)
    return out.deformation, out.texture
