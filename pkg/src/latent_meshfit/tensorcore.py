"""Tensor plumbing: deterministic RNG, gradient checking and the MIV1 tensor file format."""

from __future__ import annotations

import logging
import struct
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]

MIV1_MAGIC = b"MIV1"
MAX_NAME_BYTES = 64
# Largest payload a single tensor may declare (elements)
MAX_ELEMENTS = 2**31


class TensorFileError(Exception):
    """MIV1 tensor file error."""

    pass


class BadMagicError(TensorFileError):
    """File does not start with the MIV1 magic bytes."""

    pass


class TruncatedFileError(TensorFileError):
    """File ended before the declared content."""

    pass


class ShapeOverflowError(TensorFileError):
    """Declared tensor shape is too large to be real."""

    pass


class GradCheckError(Exception):
    """Finite-difference check could not be evaluated."""

    pass


class Rng:
    """Seeded random stream built on the Philox4x64-10 counter-based generator.

    Philox output depends only on (key, counter), so a seed reproduces the same
    stream on every platform. ``child`` derives independent sub-streams for
    per-shape or per-iteration sampling without consuming this stream.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, keys: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def child(self, *keys: int) -> Rng:
        """Return an independent stream addressed by keys."""
        return Rng(self.seed, self.keys + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape: int | tuple[int, ...]) -> Tensor:
        return self._gen.standard_normal(shape)

    def uniform(
        self, low: float = 0.0, high: float = 1.0, shape: int | tuple[int, ...] | None = None
    ) -> Tensor:
        return self._gen.uniform(low, high, shape)

    def unit_vector(self, dim: int) -> Tensor:
        """Uniformly distributed direction on the unit sphere in R^dim."""
        v = self._gen.standard_normal(dim)
        norm = np.linalg.norm(v)
        while norm < 1e-12:
            v = self._gen.standard_normal(dim)
            norm = np.linalg.norm(v)
        return v / norm

    def choice(self, n: int, size: int, replace: bool = False) -> npt.NDArray[np.int64]:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"


@dataclass
class GradReport:
    """Result of comparing an analytic gradient to central differences."""

    max_abs_err: float
    max_rel_err: float
    n_checked: int
    worst_index: int

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_err < rel_tol


def grad_check(
    f: Callable[[Tensor], tuple[float, Tensor]],
    x: npt.ArrayLike,
    eps: float = 1e-6,
    coords: Iterable[int] | None = None,
    skip: Iterable[int] | None = None,
    floor: float = 1e-4,
) -> GradReport:
    """Compare the analytic gradient of f at x to central differences.

    f returns ``(value, gradient)``; only the value is used at the perturbed
    points. Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    Args:
        f: Scalar function returning its value and gradient
        x: Evaluation point (any shape, flattened coordinate order)
        eps: Central-difference step
        coords: Flat coordinates to check (default: all)
        skip: Flat coordinates to exclude, e.g. nearest-neighbour tie points
        floor: Denominator floor for the relative error
    """
    if eps <= 0:
        raise GradCheckError(f"eps must be positive, got {eps}")
    x0 = np.array(x, dtype=np.float64)
    value, analytic = f(x0.copy())
    if not np.isfinite(value):
        raise GradCheckError("non-finite value at the evaluation point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.size != x0.size:
        raise GradCheckError(f"gradient has {analytic.size} entries, expected {x0.size}")

    selected = range(x0.size) if coords is None else coords
    excluded = set(skip or ())
    flat = x0.reshape(-1)

    max_abs = 0.0
    max_rel = 0.0
    worst = -1
    n_checked = 0
    for i in selected:
        if i in excluded:
            continue
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = f(xp.reshape(x0.shape))[0]
        fm = f(xm.reshape(x0.shape))[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite value when perturbing coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        abs_err = abs(analytic[i] - numeric)
        rel_err = abs_err / max(abs(analytic[i]), abs(numeric), floor)
        n_checked += 1
        if rel_err > max_rel or worst < 0:
            worst = i
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)

    if n_checked == 0:
        raise GradCheckError("no coordinates checked")
    logger.debug(
        "grad_check: %d coords, max_abs=%.3e max_rel=%.3e worst=%d",
        n_checked,
        max_abs,
        max_rel,
        worst,
    )
    return GradReport(
        max_abs_err=float(max_abs),
        max_rel_err=float(max_rel),
        n_checked=n_checked,
        worst_index=int(worst),
    )


def save_tensors(path: str | Path, tensors: Mapping[str, npt.ArrayLike]) -> None:
    """Write named tensors to an MIV1 container.

    Layout: magic ``MIV1``, u32 count, then per tensor u16 name length, name,
    u8 rank, rank x u32 dims and the float32 little-endian row-major payload.
    """
    chunks = [MIV1_MAGIC, struct.pack("<I", len(tensors))]
    seen: set[str] = set()
    for name, values in tensors.items():
        if name in seen:
            raise TensorFileError(f"duplicate tensor name: {name}")
        seen.add(name)
        try:
            encoded = name.encode("ascii")
        except UnicodeEncodeError:
            raise TensorFileError(f"tensor name is not ASCII: {name!r}") from None
        if not encoded or len(encoded) > MAX_NAME_BYTES:
            raise TensorFileError(f"tensor name must be 1-{MAX_NAME_BYTES} bytes: {name!r}")
        array = np.asarray(values, dtype="<f4")
        if array.ndim > 255:
            raise TensorFileError(f"tensor {name} has rank {array.ndim}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.debug("Saved %d tensors to %s", len(tensors), path)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    """Read an MIV1 container written by ``save_tensors``.

    Returns float64 arrays in file order.
    """
    reader = _Reader(Path(path).read_bytes())
    if reader.take(min(4, len(reader.data)), "magic") != MIV1_MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    (count,) = reader.unpack("<I", "tensor count")
    tensors: dict[str, Tensor] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"name length of tensor {index}")
        name = reader.take(name_len, f"name of tensor {index}").decode("ascii", errors="replace")
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name}")
        n_elements = 1
        for d in dims:
            n_elements *= d
            if n_elements > MAX_ELEMENTS:
                raise ShapeOverflowError(f"shape overflow in {name}: {dims}")
        payload = reader.take(4 * n_elements, f"payload of {name}")
        array = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        tensors[name] = array
    logger.debug("Loaded %d tensors from %s", len(tensors), path)
    return tensors
