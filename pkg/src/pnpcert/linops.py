"""Signals, linear measurement operators and spectral-norm estimation.

Every operator acts on real vectors of length ``n`` and is batch-capable:
``forward`` and ``adjoint`` accept arrays of shape ``(..., n)`` and
``(..., out_dim)`` respectively and map over the leading axes.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PNPA_MAGIC = b"PNPA"


class ParameterError(ValueError):
    """Invalid construction parameter."""


class DimensionError(ValueError):
    """Operand length does not match the operator."""


@dataclass(frozen=True, eq=False)
class Signal:
    """Real vector with optional 2D shape metadata.

    Args:
        data: vector of length n (copied to float64).
        shape: optional (height, width) with height * width == n.
        peak: dynamic-range ceiling used for PSNR.
    """

    data: np.ndarray
    shape: tuple[int, int] | None = None
    peak: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(data)):
            raise ValueError("Signal entries must be finite")
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if len(shape) != 2 or shape[0] * shape[1] != data.size:
                raise ValueError(f"shape {self.shape} incompatible with length {data.size}")
            object.__setattr__(self, "shape", shape)
        if not self.peak > 0:
            raise ValueError("peak must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_image(cls, image, peak=1.0):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ValueError("expected a 2D image")
        return cls(image.reshape(-1), image.shape, peak)

    @property
    def n(self):
        return self.data.size

    def image(self):
        if self.shape is None:
            raise ValueError("Signal has no 2D shape")
        return self.data.reshape(self.shape)

    def with_data(self, data):
        return Signal(data, self.shape, self.peak)


def as_array(x):
    """Return the float64 vector carried by ``x`` (a Signal or array-like)."""
    if isinstance(x, Signal):
        return x.data
    return np.asarray(x, dtype=np.float64)


class MeasurementOp:
    """Base class for real linear maps R^n -> R^out_dim.

    Subclasses implement ``_forward`` and ``_adjoint`` on batched arrays.
    ``m`` counts measurements; complex kinds are stored as ``2m`` reals
    (real parts followed by imaginary parts).
    """

    kind = "abstract"
    is_complex = False

    def __init__(self, m, n, seed=0, metadata=None):
        if m < 1 or n < 1:
            raise ParameterError("operator dimensions must be positive")
        self.m = int(m)
        self.n = int(n)
        self.seed = int(seed)
        self.metadata = dict(metadata or {})
        self.lambda_max = None

    @property
    def out_dim(self):
        return 2 * self.m if self.is_complex else self.m

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise DimensionError(f"expected length {self.n}, got {x.shape[-1]}")
        return self._forward(x)

    def adjoint(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.out_dim:
            raise DimensionError(f"expected length {self.out_dim}, got {u.shape[-1]}")
        return self._adjoint(u)

    def normal(self, x):
        """Apply A^T A."""
        return self.adjoint(self.forward(x))

    def matrix(self):
        """Dense matrix of the operator (columns = images of basis vectors)."""
        return self.forward(np.eye(self.n)).T

    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, u):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(m={self.m}, n={self.n}, seed={self.seed})"


class IdentityOp(MeasurementOp):
    kind = "identity"

    def __init__(self, n):
        super().__init__(n, n)
        self.lambda_max = 1.0

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, u):
        return u.copy()


class DenseOp(MeasurementOp):
    """Explicit m x n matrix; used for Gaussian-block and user-supplied operators."""

    kind = "dense-custom"

    def __init__(self, matrix, kind="dense-custom", seed=0, metadata=None):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ParameterError("matrix must be 2D")
        if not np.all(np.isfinite(matrix)):
            raise ParameterError("matrix entries must be finite")
        super().__init__(matrix.shape[0], matrix.shape[1], seed, metadata)
        matrix.setflags(write=False)
        self.A = matrix
        self.kind = kind

    def _forward(self, x):
        return x @ self.A.T

    def _adjoint(self, u):
        return u @ self.A

    def matrix(self):
        return self.A.copy()


def measurement_count(ratio, n):
    """round(ratio * n) with ties rounded up."""
    return int(math.floor(ratio * n + 0.5))


def make_gaussian_block_operator(n, ratio, seed=0):
    """Gaussian matrix with orthonormal rows.

    Rows are i.i.d. standard normal vectors orthonormalized by Gram-Schmidt
    (computed as a sign-fixed QR factorization), so ``A A^T = I_m``.
    """
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"ratio must lie in (0, 1], got {ratio}")
    if ratio * n < 1:
        raise ParameterError("ratio * n must be at least 1")
    m = measurement_count(ratio, n)
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((m, n))
    q, r = np.linalg.qr(gauss.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    rows = (q * signs).T
    op = DenseOp(rows, kind="gaussian-block", seed=seed,
                 metadata={"ratio": ratio, "rounding": "half-up"})
    return op


def make_dense_operator(matrix, seed=0):
    return DenseOp(matrix, kind="dense-custom", seed=seed)


def save_dense_operator(op_or_matrix, path):
    """Write a dense operator in the PNPA binary layout."""
    matrix = op_or_matrix.matrix() if isinstance(op_or_matrix, MeasurementOp) else np.asarray(op_or_matrix)
    m, n = matrix.shape
    with open(path, "wb") as fh:
        fh.write(PNPA_MAGIC)
        fh.write(struct.pack("<II", m, n))
        fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def load_dense_operator(path):
    """Read a PNPA file: magic, u32 m, u32 n, m*n little-endian float64 row-major."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != PNPA_MAGIC:
        raise ParameterError(f"{path}: not a PNPA operator file")
    m, n = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 8 * m * n:
        raise ParameterError(f"{path}: expected {8 * m * n} payload bytes, found {len(body)}")
    matrix = np.frombuffer(body, dtype="<f8").reshape(m, n)
    return DenseOp(matrix, kind="dense-custom")


def _is_power_of_two(v):
    return v >= 1 and (v & (v - 1)) == 0


def radial_mask(height, width, num_lines):
    """Boolean k-space mask (unshifted DFT layout) covering radial lines.

    Line j passes through the centered origin at angle j*pi/num_lines; an
    index is kept when its centered coordinates lie within half a pixel of
    some line. The mask is then closed under point reflection modulo the
    grid so that it is conjugate-symmetric.
    """
    if num_lines < 1:
        raise ParameterError("num_lines must be >= 1")
    rows = np.arange(height) - height // 2
    cols = np.arange(width) - width // 2
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    angles = np.arange(num_lines) * np.pi / num_lines
    dist = np.abs(-np.sin(angles)[:, None, None] * yy + np.cos(angles)[:, None, None] * xx)
    shifted = np.any(dist <= 0.5, axis=0)
    mask = np.fft.ifftshift(shifted)
    reflected = np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1))
    return mask | reflected


class RadialFourierOp(MeasurementOp):
    """A = P F with F the unitary 2D DFT and P a radial 0/1 sampling mask."""

    kind = "radial-fourier"
    is_complex = True

    def __init__(self, height, width, mask, num_lines=None, seed=0):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (height, width):
            raise ParameterError("mask shape must equal image shape")
        super().__init__(int(mask.sum()), height * width, seed,
                         {"num_lines": num_lines, "ratio": float(mask.mean())})
        self.height = height
        self.width = width
        mask.setflags(write=False)
        self.mask = mask
        self._index = np.flatnonzero(mask.reshape(-1))
        self.lambda_max = None

    def _forward(self, x):
        lead = x.shape[:-1]
        img = x.reshape(lead + (self.height, self.width))
        k = np.fft.fft2(img, norm="ortho").reshape(lead + (self.n,))[..., self._index]
        return np.concatenate([k.real, k.imag], axis=-1)

    def _adjoint(self, u):
        lead = u.shape[:-1]
        full = np.zeros(lead + (self.n,), dtype=np.complex128)
        full[..., self._index] = u[..., : self.m] + 1j * u[..., self.m:]
        img = np.fft.ifft2(full.reshape(lead + (self.height, self.width)), norm="ortho")
        return img.real.reshape(lead + (self.n,))


def make_radial_fourier_operator(height, width, num_lines, seed=0):
    if not (_is_power_of_two(height) and _is_power_of_two(width)):
        raise ParameterError(f"image dims must be powers of two, got {height}x{width}")
    if num_lines < 1:
        raise ParameterError("num_lines must be >= 1")
    return RadialFourierOp(height, width, radial_mask(height, width, num_lines), num_lines, seed)


def lines_for_ratio(height, width, ratio, max_lines=None):
    """Smallest line count (found by bisection) whose mask keeps >= ratio of k-space."""
    if not 0.0 < ratio <= 1.0:
        raise ParameterError("ratio must lie in (0, 1]")
    hi = max_lines or 4 * max(height, width)
    if radial_mask(height, width, hi).mean() < ratio:
        raise ParameterError(f"ratio {ratio} not reachable with {hi} lines")
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if radial_mask(height, width, mid).mean() >= ratio:
            hi = mid
        else:
            lo = mid
    return hi


class PatchBlockOp(MeasurementOp):
    """Block-diagonal operator applying one per-patch operator to every patch.

    The image (height x width, both multiples of ``patch``) is split into
    non-overlapping patch x patch tiles, each vectorized row-major.
    """

    kind = "patch-block"

    def __init__(self, height, width, patch, block):
        if height % patch or width % patch:
            raise ParameterError("image dims must be multiples of the patch size")
        if block.n != patch * patch:
            raise ParameterError("block operator dimension must equal patch**2")
        self.height, self.width, self.patch = height, width, patch
        self.block = block
        self.tiles = (height // patch) * (width // patch)
        super().__init__(self.tiles * block.out_dim, height * width, block.seed,
                         {"patch": patch, "tiles": self.tiles, "block_kind": block.kind})

    def to_patches(self, x):
        lead = x.shape[:-1]
        p = self.patch
        t = x.reshape(lead + (self.height // p, p, self.width // p, p))
        t = np.moveaxis(t, -3, -2)
        return t.reshape(lead + (self.tiles, p * p))

    def from_patches(self, t):
        lead = t.shape[:-2]
        p = self.patch
        t = t.reshape(lead + (self.height // p, self.width // p, p, p))
        t = np.moveaxis(t, -2, -3)
        return t.reshape(lead + (self.n,))

    def _forward(self, x):
        lead = x.shape[:-1]
        return self.block.forward(self.to_patches(x)).reshape(lead + (self.m,))

    def _adjoint(self, u):
        lead = u.shape[:-1]
        blocks = self.block.adjoint(u.reshape(lead + (self.tiles, self.block.out_dim)))
        return self.from_patches(blocks)


def apply(op, x):
    """y = A x; returns a Signal when given one."""
    y = op.forward(as_array(x))
    return Signal(y) if isinstance(x, Signal) else y


def adjoint_apply(op, u):
    """z = A^T u; the result inherits 2D shape metadata from square-image operators."""
    z = op.adjoint(as_array(u))
    if isinstance(u, Signal):
        shape = getattr(op, "height", None) and (op.height, op.width)
        return Signal(z, shape or None)
    return z


@dataclass
class SpectralEstimate:
    value: float
    iterations: int
    residual: float
    converged: bool = True
    tol: float = field(default=1e-10)


def spectral_norm(op, tol=1e-10, max_iters=1000, seed=0, cache=True):
    """Power iteration on A^T A from a seeded random start.

    The returned value is the Rayleigh quotient ||A v||^2 of the final unit
    iterate, so it never exceeds the true largest eigenvalue (up to rounding).
    """
    if not tol > 0:
        raise ParameterError("tol must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.n)
    v /= np.linalg.norm(v)
    prev = None
    value, rel = 0.0, np.inf
    it = 0
    for it in range(1, max_iters + 1):
        w = op.normal(v)
        value = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            rel = 0.0
            break
        v = w / nw
        if prev is not None:
            rel = abs(value - prev) / max(abs(value), np.finfo(float).tiny)
            if rel <= tol:
                break
        prev = value
    converged = rel <= tol
    if not converged:
        logger.warning("power iteration did not reach tol=%g in %d iterations", tol, max_iters)
    est = SpectralEstimate(value, it, float(rel), converged, tol)
    if cache and converged:
        op.lambda_max = value
    return est
