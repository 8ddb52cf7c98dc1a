"""PnP-PGM and SD-RED with optional Nesterov momentum."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .linops import as_array, spectral_norm


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    """Iterates became non-finite or blew up; ``trace`` holds the finite prefix."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class Problem:
    """Linear inverse problem y = A x* + e with g(x) = 0.5 ||y - A x||^2."""

    op: object
    y: np.ndarray
    x_true: np.ndarray | None = None
    noise_norm: float | None = None

    def __post_init__(self):
        self.y = np.array(as_array(self.y), dtype=np.float64)
        if self.y.shape != (self.op.out_dim,):
            raise ValueError(f"y must have length {self.op.out_dim}")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("y must be finite")
        if self.x_true is not None:
            self.x_true = np.array(as_array(self.x_true), dtype=np.float64)
            if self.x_true.shape != (self.op.n,):
                raise ValueError(f"x_true must have length {self.op.n}")

    @classmethod
    def from_truth(cls, op, x_true, noise=None):
        x_true = np.array(as_array(x_true), dtype=np.float64)
        y = op.forward(x_true)
        noise_norm = 0.0
        if noise is not None:
            noise = np.asarray(noise, dtype=np.float64)
            y = y + noise
            noise_norm = float(np.linalg.norm(noise))
        return cls(op, y, x_true, noise_norm)

    @property
    def noiseless(self):
        return not self.noise_norm

    def datafit(self, x):
        r = self.y - self.op.forward(as_array(x))
        return 0.5 * float(r @ r)


def grad_datafit(problem, x):
    """A^T (A x - y)."""
    x = as_array(x)
    return problem.op.adjoint(problem.op.forward(x) - problem.y)


@dataclass
class SolverConfig:
    gamma: float | None = None
    tau: float = 1.0
    max_iters: int = 1000
    tol: float = 1e-9
    accelerate: bool = False
    init: str = "adjoint-through-prior"
    x0: np.ndarray | None = None
    snapshot_every: int = 0
    monitor_residual: bool = True

    def __post_init__(self):
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.init not in ("adjoint-through-prior", "zero", "custom"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "custom" and self.x0 is None:
            raise ValueError("custom init needs x0")


TRACE_COLUMNS = ("iter", "delta_x", "res_R", "grad_g", "red_G", "gap", "psnr")


@dataclass
class SolverTrace:
    algorithm: str
    gamma: float
    iters: list = field(default_factory=list)
    delta_x: list = field(default_factory=list)
    res_R: list = field(default_factory=list)
    grad_g: list = field(default_factory=list)
    red_G: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    digests: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    status: str = "running"
    x: np.ndarray | None = None
    x0: np.ndarray | None = None
    accelerated: bool = False

    @property
    def iterations(self):
        """Number of updates performed."""
        return self.iters[-1] if self.iters else 0

    def gaps(self):
        return np.asarray(self.gap, dtype=np.float64)

    def rows(self):
        for i in range(len(self.iters)):
            row = {name: getattr(self, name)[i] for name in TRACE_COLUMNS[1:]}
            yield {"iter": self.iters[i], **row}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows():
                writer.writerow(_fmt(row[c]) for c in TRACE_COLUMNS)


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _psnr(x, ref, peak=1.0):
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return 300.0
    return 10.0 * math.log10(peak * peak / mse)


def momentum_sequence(iters):
    """Nesterov weights: q_0 = 1, q_k = (1 + sqrt(1 + 4 q_{k-1}^2)) / 2, c_k = (q_{k-1} - 1) / q_k.

    Returns arrays q[0..iters] and c[0..iters] (c[0] unused, set to 0).
    """
    q = np.empty(iters + 1)
    c = np.zeros(iters + 1)
    q[0] = 1.0
    for k in range(1, iters + 1):
        q[k] = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * q[k - 1] ** 2))
        c[k] = (q[k - 1] - 1.0) / q[k]
    return q, c


def default_gamma(algorithm, lam, tau=1.0, alpha=None, window=None):
    """Default step size.

    PnP: geometric mean of the contraction window when one is available,
    else 1/lambda. RED: 1/(lambda + tau * alpha), the inverse Lipschitz
    constant of G (alpha defaults to 1).
    """
    if algorithm == "pnp":
        if window is not None and not window.empty:
            return window.geometric_mean
        return 1.0 / lam
    a = 1.0 if alpha is None else alpha
    return 1.0 / (lam + tau * a)


def _lambda_of(op):
    if op.lambda_max is None:
        return spectral_norm(op).value
    return op.lambda_max


def _initial_point(problem, prior, config):
    if config.init == "custom":
        x0 = np.array(as_array(config.x0), dtype=np.float64)
        if x0.shape != (problem.op.n,):
            raise ValueError("x0 has the wrong length")
        return x0
    if config.init == "zero":
        return np.zeros(problem.op.n)
    return prior.denoise(problem.op.adjoint(problem.y))


def _run(problem, prior, config, algorithm):
    if prior.n != problem.op.n:
        raise ValueError(f"prior dimension {prior.n} != operator dimension {problem.op.n}")
    gamma = config.gamma
    if gamma is None:
        gamma = default_gamma(algorithm, _lambda_of(problem.op), config.tau, prior.alpha)
    tau = config.tau
    x = _initial_point(problem, prior, config)
    trace = SolverTrace(algorithm, gamma, accelerated=config.accelerate, x0=x.copy())
    limit = 1e12 * (1.0 + float(np.linalg.norm(x)))
    truth = problem.x_true
    peak = 1.0

    def record(k, xk, dx, grad):
        need_r = config.monitor_residual or algorithm == "red"
        r = prior.residual(xk) if need_r else None
        trace.iters.append(k)
        trace.delta_x.append(dx)
        trace.res_R.append(float(np.linalg.norm(r)) if config.monitor_residual else math.nan)
        trace.grad_g.append(float(np.linalg.norm(grad)))
        if algorithm == "red":
            trace.red_G.append(float(np.linalg.norm(grad + tau * r)))
        else:
            trace.red_G.append(math.nan)
        if truth is not None:
            trace.gap.append(float(np.linalg.norm(xk - truth)))
            trace.psnr.append(_psnr(xk, truth, peak))
        else:
            trace.gap.append(math.nan)
            trace.psnr.append(math.nan)
        trace.digests.append(hashlib.sha1(xk.tobytes()).hexdigest()[:16])
        if config.snapshot_every and k % config.snapshot_every == 0:
            trace.snapshots[k] = xk.copy()

    record(0, x, math.nan, grad_datafit(problem, x))
    q_prev = 1.0
    s = x
    x_prev = x
    trace.status = "max_iters"
    for k in range(1, config.max_iters + 1):
        base = s if config.accelerate else x
        grad_base = grad_datafit(problem, base)
        if algorithm == "pnp":
            x_new = prior.denoise(base - gamma * grad_base)
        else:
            x_new = base - gamma * (grad_base + tau * prior.residual(base))
        norm_new = float(np.linalg.norm(x_new))
        if not np.all(np.isfinite(x_new)) or norm_new > limit:
            trace.status = "diverged"
            trace.x = x
            raise DivergenceError(f"{algorithm} diverged at iteration {k}", trace)
        dx = float(np.linalg.norm(x_new - x))
        x_prev, x = x, x_new
        if config.accelerate:
            q = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * q_prev * q_prev))
            ck = (q_prev - 1.0) / q
            s = x + ck * (x - x_prev)
            q_prev = q
        record(k, x, dx, grad_datafit(problem, x))
        if dx <= config.tol * norm_new:
            trace.status = "converged"
            break
    trace.x = x
    return trace


def pnp_pgm(problem, prior, config=None):
    """x^k = D(x^{k-1} - gamma grad g(x^{k-1})), or its accelerated variant."""
    return _run(problem, prior, config or SolverConfig(), "pnp")


def sd_red(problem, prior, config=None):
    """x^k = x^{k-1} - gamma (grad g + tau (I - D))(x^{k-1}), or its accelerated variant."""
    return _run(problem, prior, config or SolverConfig(), "red")


@dataclass(frozen=True)
class StepWindow:
    lo: float | None
    hi: float | None
    reason: str = ""

    @property
    def empty(self):
        return self.lo is None

    def contains(self, gamma):
        return not self.empty and self.lo < gamma < self.hi

    @property
    def midpoint(self):
        return None if self.empty else 0.5 * (self.lo + self.hi)

    @property
    def geometric_mean(self):
        if self.empty:
            return None
        if self.lo <= 0.0:
            return self.midpoint
        return math.sqrt(self.lo * self.hi)

    def as_list(self):
        return None if self.empty else [self.lo, self.hi]


def step_size_window(alpha, mu, lam):
    """Open interval of step sizes giving a contraction constant below one.

    alpha of None or 0 yields the classical gradient-descent range (0, 2/lambda).
    """
    if not (mu > 0 and lam > 0):
        raise ValueError("mu and lambda must be positive")
    if alpha is not None and alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if not alpha:
        return StepWindow(0.0, 2.0 / lam)
    if lam > mu and alpha >= 2.0 * mu / (lam - mu):
        return StepWindow(None, None, f"alpha={alpha:g} >= 2 mu / (lambda - mu) = {2 * mu / (lam - mu):g}")
    shrink = 1.0 + 1.0 / alpha
    lo = 1.0 / (mu * shrink)
    hi = 2.0 / lam - 1.0 / (lam * shrink)
    if not lo < hi:
        return StepWindow(None, None, "window collapsed")
    return StepWindow(lo, hi)


def contraction_constant(alpha, gamma, mu, lam):
    """(1 + alpha) max{|1 - gamma mu|, |1 - gamma lambda|}."""
    a = alpha or 0.0
    return (1.0 + a) * max(abs(1.0 - gamma * mu), abs(1.0 - gamma * lam))
