"""Denoisers D and their residuals R = I - D.

Priors operate on flattened vectors and accept batches of shape ``(..., n)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .linops import as_array

PNPW_MAGIC = b"PNPW"


class PriorError(ValueError):
    pass


def _check_dim(x, n):
    if x.shape[-1] != n:
        raise PriorError(f"prior expects length {n}, got {x.shape[-1]}")


class Prior:
    """Base denoiser.

    Attributes:
        kind: prior family name.
        shape: working shape of a single signal (1D or 2D).
        alpha: declared Lipschitz constant of R, or None.
        delta: declared bound on ||R(x)||, or None.
        sigma: nominal noise level (metadata only).
        theta: scaling weight for scaled priors.
        exact_alpha: True when ``alpha`` is known in closed form.
    """

    kind = "abstract"
    exact_alpha = False

    def __init__(self, shape, alpha=None, delta=None, sigma=None, theta=None):
        self.shape = tuple(int(s) for s in shape)
        self.n = int(np.prod(self.shape))
        self.alpha = alpha
        self.delta = delta
        self.sigma = sigma
        self.theta = theta

    def denoise(self, x):
        """D(x); a Signal input yields a Signal."""
        arr = as_array(x)
        _check_dim(arr, self.n)
        out = self._denoise(arr)
        return x.with_data(out) if hasattr(x, "with_data") else out

    def residual(self, x):
        """R(x) computed as x - D(x) through the same code path as ``denoise``."""
        arr = as_array(x)
        _check_dim(arr, self.n)
        out = arr - self._denoise(arr)
        return x.with_data(out) if hasattr(x, "with_data") else out

    @property
    def has_exact_projector(self):
        return False

    def project_exact(self, x):
        raise PriorError(f"{self.kind} prior has no exact projector onto Zer(R)")

    def _denoise(self, x):
        raise NotImplementedError

    def _images(self, x):
        return x.reshape(x.shape[:-1] + self.shape)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, alpha={self.alpha})"


class IdentityPrior(Prior):
    kind = "identity"
    exact_alpha = True

    def __init__(self, shape):
        super().__init__(shape, alpha=0.0, delta=0.0)

    def _denoise(self, x):
        return x.copy()

    @property
    def has_exact_projector(self):
        return True

    def project_exact(self, x):
        return np.array(x, dtype=np.float64)


def lowest_frequencies(shape, k):
    """Boolean DCT mask holding the k lowest frequencies.

    Frequencies are ordered by squared radius, ties broken by flat index.
    """
    shape = tuple(shape)
    if not 1 <= k <= int(np.prod(shape)):
        raise PriorError("k must lie in [1, n]")
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    radius = sum(g.astype(np.int64) ** 2 for g in grids).reshape(-1)
    order = np.lexsort((np.arange(radius.size), radius))
    mask = np.zeros(radius.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(shape)


def _keep_mask(shape, keep):
    keep_arr = np.asarray(keep)
    if keep_arr.dtype == bool:
        if keep_arr.shape != tuple(shape):
            raise PriorError("boolean keep mask must match the prior shape")
        mask = keep_arr.copy()
    else:
        mask = np.zeros(int(np.prod(shape)), dtype=bool)
        idx = keep_arr.astype(np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= mask.size):
            raise PriorError("keep index out of range")
        mask[idx] = True
        mask = mask.reshape(shape)
    if not mask.any():
        raise PriorError("keep set must be nonempty")
    return mask


class SubspaceProjector(Prior):
    """Orthogonal projector onto a span of orthonormal DCT atoms.

    D = IDCT . mask . DCT, so Fix(D) = Im(D) = Zer(R) and R = I - D is an
    orthogonal projector (exactly 1-Lipschitz). ``delta`` stays unset: R is
    unbounded on R^n; on the box [0, peak]^n it is bounded by peak * sqrt(n).
    """

    kind = "subspace-projector"
    exact_alpha = True

    def __init__(self, shape, keep):
        super().__init__(shape, alpha=1.0)
        self.keep = _keep_mask(self.shape, keep)
        self.keep.setflags(write=False)
        self.rank = int(self.keep.sum())

    def _denoise(self, x):
        axes = tuple(range(-len(self.shape), 0))
        coeff = dctn(self._images(x), norm="ortho", axes=axes)
        coeff = coeff * self.keep
        return idctn(coeff, norm="ortho", axes=axes).reshape(x.shape)

    def box_delta(self, peak=1.0):
        return peak * math.sqrt(self.n)

    def basis(self):
        """n x rank matrix whose orthonormal columns span Im(D)."""
        eye = np.zeros((self.rank, self.n))
        flat = np.flatnonzero(self.keep.reshape(-1))
        eye[np.arange(self.rank), flat] = 1.0
        axes = tuple(range(-len(self.shape), 0))
        atoms = idctn(eye.reshape((self.rank,) + self.shape), norm="ortho", axes=axes)
        return atoms.reshape(self.rank, self.n).T

    @property
    def has_exact_projector(self):
        return True

    def project_exact(self, x):
        return self._denoise(np.asarray(x, dtype=np.float64))


def make_subspace_projector(shape, keep):
    return SubspaceProjector(shape, keep)


class ScaledPrior(Prior):
    """D_theta = (1 - theta) I + theta D_base, hence R_theta = theta R_base."""

    kind = "scaled-residual"

    def __init__(self, base, theta):
        if not 0.0 < theta < 1.0:
            raise PriorError(f"theta must lie in (0, 1), got {theta}")
        if base.alpha is None:
            raise PriorError("base prior needs a declared alpha")
        super().__init__(base.shape, alpha=theta * base.alpha,
                         delta=None if base.delta is None else theta * base.delta,
                         sigma=base.sigma, theta=theta)
        self.base = base
        self.exact_alpha = base.exact_alpha

    def _denoise(self, x):
        return (1.0 - self.theta) * x + self.theta * self.base._denoise(x)

    @property
    def has_exact_projector(self):
        return self.base.has_exact_projector

    def project_exact(self, x):
        return self.base.project_exact(x)


def make_scaled_prior(base, theta):
    return ScaledPrior(base, theta)


def finite_diff(u):
    """Forward differences (zero at the far edge) along the last two axes."""
    dv = np.zeros_like(u)
    dh = np.zeros_like(u)
    dv[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    dh[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    return dv, dh


def finite_diff_adjoint(pv, ph):
    """Adjoint of ``finite_diff`` (negative divergence)."""
    out = np.zeros_like(pv)
    out[..., 0, :] -= pv[..., 0, :]
    out[..., 1:-1, :] += pv[..., :-2, :] - pv[..., 1:-1, :]
    out[..., -1, :] += pv[..., -2, :]
    out[..., :, 0] -= ph[..., :, 0]
    out[..., :, 1:-1] += ph[..., :, :-2] - ph[..., :, 1:-1]
    out[..., :, -1] += ph[..., :, -2]
    return out


def total_variation(image):
    """Anisotropic TV: sum of absolute forward differences."""
    dv, dh = finite_diff(np.asarray(image, dtype=np.float64))
    return float(np.abs(dv).sum() + np.abs(dh).sum())


class TVProxPrior(Prior):
    """Approximate prox of weight * anisotropic TV.

    Runs ``dual_iters`` projected-gradient steps (step 1/8 in the scaled
    dual) from a zero dual variable, then maps back to the primal.
    """

    kind = "tv-prox"

    def __init__(self, shape, weight, dual_iters=100):
        if len(tuple(shape)) != 2:
            raise PriorError("tv-prox prior needs a 2D shape")
        if min(shape) < 2:
            raise PriorError("tv-prox prior needs at least 2 pixels per axis")
        if not weight > 0:
            raise PriorError("weight must be positive")
        if dual_iters < 1:
            raise PriorError("dual_iters must be >= 1")
        super().__init__(shape)
        self.weight = float(weight)
        self.dual_iters = int(dual_iters)

    def _denoise(self, x):
        img = self._images(x)
        w = self.weight
        pv = np.zeros_like(img)
        ph = np.zeros_like(img)
        step = 1.0 / (8.0 * w)
        for _ in range(self.dual_iters):
            u = img - w * finite_diff_adjoint(pv, ph)
            gv, gh = finite_diff(u)
            pv = np.clip(pv + step * gv, -1.0, 1.0)
            ph = np.clip(ph + step * gh, -1.0, 1.0)
        out = img - w * finite_diff_adjoint(pv, ph)
        return out.reshape(x.shape)


def make_tv_prox_prior(shape, weight, dual_iters=100):
    return TVProxPrior(shape, weight, dual_iters)


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)
    budget: float

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class ConvResidualWeights:
    layers: list[ConvLayer]
    alpha: float
    norms: list[float] = field(default_factory=list)


def conv2d(x, weight, bias=None):
    """'Same' cross-correlation with zero padding and stride 1.

    ``x`` has shape (..., in, H, W); ``weight`` is (out, in, k, k), k odd.
    """
    out_c, in_c, k, _ = weight.shape
    pad = k // 2
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    xp = np.pad(x, [(0, 0)] * len(lead) + [(0, 0), (pad, pad), (pad, pad)])
    out = np.zeros(lead + (out_c, h, w))
    for dy in range(k):
        for dx in range(k):
            patch = xp[..., :, dy:dy + h, dx:dx + w]
            out += np.einsum("oi,...ihw->...ohw", weight[:, :, dy, dx], patch)
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_adjoint(y, weight):
    """Adjoint of the linear part of ``conv2d``."""
    out_c, in_c, k, _ = weight.shape
    pad = k // 2
    lead = y.shape[:-3]
    h, w = y.shape[-2:]
    xp = np.zeros(lead + (in_c, h + 2 * pad, w + 2 * pad))
    for dy in range(k):
        for dx in range(k):
            xp[..., :, dy:dy + h, dx:dx + w] += np.einsum("oi,...ohw->...ihw", weight[:, :, dy, dx], y)
    return xp[..., :, pad:pad + h, pad:pad + w]


def conv_operator_norm(weight, shape, tol=1e-12, max_iters=5000, seed=0):
    """Power-iteration estimate of the operator norm of a zero-padded conv.

    Returns (norm, converged).
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((weight.shape[1],) + tuple(shape))
    v /= np.linalg.norm(v)
    prev = None
    val = 0.0
    for _ in range(max_iters):
        w = conv2d_adjoint(conv2d(v, weight), weight)
        val = float(np.sum(v * w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        v = w / nw
        if prev is not None and abs(val - prev) <= tol * abs(val):
            return math.sqrt(max(val, 0.0)), True
        prev = val
    return math.sqrt(max(val, 0.0)), False


def save_conv_residual_weights(path, layers, alpha):
    """Write layers [(weight, bias, budget), ...] in the PNPW layout."""
    with open(path, "wb") as fh:
        fh.write(PNPW_MAGIC)
        fh.write(struct.pack("<I", len(layers)))
        for weight, bias, budget in layers:
            weight = np.asarray(weight, dtype="<f4")
            out_c, in_c, k, k2 = weight.shape
            if k != k2:
                raise PriorError("kernels must be square")
            fh.write(struct.pack("<IIId", out_c, in_c, k, float(budget)))
            fh.write(np.ascontiguousarray(weight).tobytes())
            fh.write(np.ascontiguousarray(np.asarray(bias, dtype="<f4").reshape(out_c)).tobytes())
        fh.write(struct.pack("<d", float(alpha)))


def read_conv_residual_weights(path):
    raw = Path(path).read_bytes()
    if raw[:4] != PNPW_MAGIC:
        raise PriorError(f"{path}: not a PNPW weights file")
    pos = 4

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(raw):
            raise PriorError(f"{path}: truncated file")
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    layers = []
    for _ in range(count):
        out_c, in_c, k, budget = struct.unpack("<IIId", take(20))
        size = out_c * in_c * k * k
        weight = np.frombuffer(take(4 * size), dtype="<f4").reshape(out_c, in_c, k, k)
        bias = np.frombuffer(take(4 * out_c), dtype="<f4")
        layers.append(ConvLayer(weight.astype(np.float64), bias.astype(np.float64), budget))
    (alpha,) = struct.unpack("<d", take(8))
    if pos != len(raw):
        raise PriorError(f"{path}: {len(raw) - pos} trailing bytes")
    return ConvResidualWeights(layers, alpha)


class ConvResidualPrior(Prior):
    """D = I - R with R a conv-ReLU stack (last layer linear)."""

    kind = "conv-residual"

    def __init__(self, shape, weights):
        if len(tuple(shape)) != 2:
            raise PriorError("conv-residual prior needs a 2D shape")
        super().__init__(shape, alpha=weights.alpha)
        self.weights = weights

    def residual_map(self, x):
        h = self._images(x)[..., None, :, :]
        layers = self.weights.layers
        for i, layer in enumerate(layers):
            h = conv2d(h, layer.weight, layer.bias)
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h[..., 0, :, :].reshape(x.shape)

    def _denoise(self, x):
        return x - self.residual_map(x)


def load_conv_residual_prior(path, shape, norm_tol=1e-12, norm_max_iters=5000):
    """Load PNPW weights and spectrally normalize each layer to its budget.

    Every layer whose estimated operator norm (at ``shape``) exceeds its
    budget is rescaled to the budget, so the product of layer norms is at
    most the product of budgets, which must equal the declared alpha.
    """
    weights = read_conv_residual_weights(path)
    if not weights.layers:
        raise PriorError("weights file has no layers")
    expected_in = 1
    for i, layer in enumerate(weights.layers):
        out_c, in_c, k, _ = layer.shape
        if in_c != expected_in:
            raise PriorError(f"layer {i}: expects {in_c} input channels, chain provides {expected_in}")
        if k % 2 == 0:
            raise PriorError(f"layer {i}: kernel size must be odd")
        if not layer.budget > 0:
            raise PriorError(f"layer {i}: budget must be positive")
        expected_in = out_c
    if expected_in != 1:
        raise PriorError("final layer must produce a single channel")
    budget_product = float(np.prod([layer.budget for layer in weights.layers]))
    if not math.isclose(budget_product, weights.alpha, rel_tol=1e-9, abs_tol=1e-12):
        raise PriorError(f"product of budgets {budget_product} != declared alpha {weights.alpha}")
    norms = []
    for i, layer in enumerate(weights.layers):
        norm, ok = conv_operator_norm(layer.weight, shape, tol=norm_tol, max_iters=norm_max_iters)
        if not ok:
            raise PriorError(f"layer {i}: spectral normalization did not converge")
        if norm > layer.budget:
            layer.weight = layer.weight * (layer.budget / norm)
            norm = layer.budget
        norms.append(norm)
    weights.norms = norms
    return ConvResidualPrior(shape, weights)


@dataclass
class FixedPointRun:
    residual_sq: np.ndarray  # ||R(x^k)||^2 for k = 0..iters
    snapshots: dict[int, np.ndarray]
    final: np.ndarray


def fixed_point_iterate(prior, x0, iters, snapshot_at=()):
    """Iterate x^k = D(x^{k-1}) and record ||R(x^k)||^2 for k = 0..iters."""
    if iters < 1:
        raise PriorError("iters must be >= 1")
    x = np.array(as_array(x0), dtype=np.float64)
    _check_dim(x, prior.n)
    wanted = set(int(s) for s in snapshot_at)
    res = np.empty(iters + 1)
    snaps = {}
    for k in range(iters + 1):
        d = prior._denoise(x)
        r = x - d
        res[k] = float(r @ r)
        if k in wanted:
            snaps[k] = x.copy()
        if k < iters:
            x = d
    return FixedPointRun(res, snaps, x)


@dataclass
class ZerProjection:
    x: np.ndarray
    residual: float
    exact: bool
    converged: bool
    iterations: int = 0

    def distance(self, ref):
        return float(np.linalg.norm(as_array(ref) - self.x))


def project_zer_r(prior, x, tol=1e-10, max_iters=10000):
    """Project onto Zer(R): exact for projector-backed priors, else iterate D."""
    arr = np.array(as_array(x), dtype=np.float64)
    _check_dim(arr, prior.n)
    if prior.has_exact_projector:
        p = prior.project_exact(arr)
        return ZerProjection(p, float(np.linalg.norm(prior.residual(p))), True, True)
    z = arr
    for it in range(max_iters + 1):
        d = prior._denoise(z)
        res = float(np.linalg.norm(z - d))
        if res <= tol:
            return ZerProjection(z, res, False, True, it)
        if it < max_iters:
            z = d
    return ZerProjection(z, res, False, False, max_iters)
