"""Empirical estimates of the convergence constants and checks of the recovery bounds."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linops import as_array, spectral_norm
from .solvers import (
    DivergenceError,
    SolverConfig,
    contraction_constant,
    default_gamma,
    grad_datafit,
    pnp_pgm,
    sd_red,
    step_size_window,
)

PAIR_MODES = ("awgn-pairs", "image-space-pairs", "subspace-pairs")
BLOCK_SIZE = 1024
DEGENERATE = 1e-12


class CertificateError(ValueError):
    pass


class VacuousBoundError(ValueError):
    """Raised when c >= 1, so the error bound carries no information."""


class PairSampler:
    """Deterministic generator of input pairs (x, z) for ratio estimators.

    Pairs are produced in blocks of ``BLOCK_SIZE``; block ``b`` draws from
    ``default_rng([seed, b])``, so the first N pairs do not depend on
    ``count`` and estimates over a larger count extend smaller ones.

    Args:
        mode: ``awgn-pairs`` (two noisy copies of one base image),
            ``image-space-pairs`` (noisy copies of two independent base
            images) or ``subspace-pairs`` (standard normal vectors pushed
            through ``prior``).
        corpus: base signals; empty means the zero image for awgn pairs and
            pure noise for image-space pairs.
        sigmas: noise levels, one drawn uniformly per pair member.
        count: number of pairs (at least 2).
        seed: integer seed.
        dim: signal length, required when the corpus is empty and no prior
            is given.
        prior: denoiser used by ``subspace-pairs``.
    """

    def __init__(self, mode, corpus=(), sigmas=(0.05, 0.1, 0.2), count=1000, seed=0,
                 dim=None, prior=None):
        if mode not in PAIR_MODES:
            raise ValueError(f"unknown pair mode {mode!r}")
        if count < 2:
            raise ValueError("count must be >= 2")
        self.mode = mode
        self.corpus = np.array([as_array(c) for c in corpus], dtype=np.float64)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        if mode != "subspace-pairs" and (self.sigmas.size == 0 or np.any(self.sigmas <= 0)):
            raise ValueError("sigmas must be a nonempty list of positive values")
        self.count = int(count)
        self.seed = int(seed)
        self.prior = prior
        if dim is None:
            if len(self.corpus):
                dim = self.corpus.shape[1]
            elif prior is not None:
                dim = prior.n
            else:
                raise ValueError("dim is required without a corpus")
        self.dim = int(dim)
        if len(self.corpus) and self.corpus.shape[1] != self.dim:
            raise ValueError("corpus signals do not match dim")
        if mode == "subspace-pairs" and prior is None:
            raise ValueError("subspace-pairs needs a prior")

    def with_count(self, count):
        return PairSampler(self.mode, self.corpus, self.sigmas, count, self.seed,
                           self.dim, self.prior)

    def _bases(self, rng, size):
        if not len(self.corpus):
            return np.zeros((size, self.dim))
        return self.corpus[rng.integers(len(self.corpus), size=size)]

    def _block(self, index):
        rng = np.random.default_rng([self.seed, index])
        b, n = BLOCK_SIZE, self.dim
        if self.mode == "subspace-pairs":
            x = self.prior.denoise(rng.standard_normal((b, n)))
            z = self.prior.denoise(rng.standard_normal((b, n)))
            return x, z
        s1 = rng.choice(self.sigmas, size=(b, 1))
        s2 = rng.choice(self.sigmas, size=(b, 1))
        base_x = self._bases(rng, b)
        base_z = base_x if self.mode == "awgn-pairs" else self._bases(rng, b)
        if self.mode == "image-space-pairs" and not len(self.corpus):
            base_x = rng.standard_normal((b, n))
            base_z = rng.standard_normal((b, n))
        x = base_x + s1 * rng.standard_normal((b, n))
        z = base_z + s2 * rng.standard_normal((b, n))
        return x, z

    def blocks(self):
        """Yield (x, z) arrays of shape (b, n); the last block is truncated."""
        remaining = self.count
        index = 0
        while remaining > 0:
            x, z = self._block(index)
            take = min(remaining, BLOCK_SIZE)
            yield x[:take], z[:take]
            remaining -= take
            index += 1

    def pairs(self):
        xs, zs = zip(*self.blocks())
        return np.concatenate(xs), np.concatenate(zs)


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    @classmethod
    def of(cls, ratios, bins=50):
        top = 1.1 * float(np.max(ratios)) if len(ratios) else 0.0
        if top <= 0.0:
            top = 1.0
        counts, edges = np.histogram(ratios, bins=bins, range=(0.0, top))
        return cls(counts, edges)

    def to_dict(self):
        return {"counts": self.counts.tolist(), "edges": self.edges.tolist()}


@dataclass
class RatioEstimate:
    value: float
    histogram: Histogram
    pairs: int
    skipped: int
    ratios: np.ndarray = field(repr=False)
    note: str = ""


def _collect(sampler, ratio_fn):
    ratios, skipped = [], 0
    for x, z in sampler.blocks():
        num, den, dist = ratio_fn(x, z)
        keep = dist > DEGENERATE
        skipped += int(np.count_nonzero(~keep))
        ratios.append(num[keep] / den[keep])
    ratios = np.concatenate(ratios)
    if not len(ratios):
        raise CertificateError("all sampled pairs were degenerate")
    return ratios, skipped


def estimate_lipschitz(mapping, sampler, bins=50):
    """Max of ||T(x) - T(z)|| / ||x - z|| over the sampler's pairs.

    Args:
        mapping: batched map, typically ``prior.residual`` or ``prior.denoise``.
        sampler: PairSampler.
        bins: histogram bin count.
    """

    def ratio(x, z):
        num = np.linalg.norm(mapping(x) - mapping(z), axis=-1)
        den = np.linalg.norm(x - z, axis=-1)
        return num, den, den

    ratios, skipped = _collect(sampler, ratio)
    return RatioEstimate(float(ratios.max()), Histogram.of(ratios, bins), len(ratios),
                         skipped, ratios)


def estimate_srec_mu(op, prior, sampler, bins=50):
    """Min of ||A(x - z)||^2 / ||x - z||^2 over pairs pushed through D.

    The minimum over finitely many pairs can only overestimate the true
    restricted constant, and it shrinks monotonically as ``count`` grows.
    """

    def ratio(x, z):
        h = prior.denoise(x) - prior.denoise(z)
        num = np.sum(op.forward(h) ** 2, axis=-1)
        den = np.sum(h * h, axis=-1)
        return num, den, np.sqrt(den)

    ratios, skipped = _collect(sampler, ratio)
    return RatioEstimate(float(ratios.min()), Histogram.of(ratios, bins), len(ratios),
                         skipped, ratios, note="empirical lower bound")


def restricted_eigenvalues(op, basis):
    """Eigenvalues of B^T A^T A B for an orthonormal basis B (dense oracle)."""
    basis = np.asarray(basis, dtype=np.float64)
    ab = op.forward(basis.T)
    return np.linalg.eigvalsh(ab @ ab.T)


def error_bound_epsilon(c, lam, mu, dist_zer, err_norm, delta, alpha):
    """(1+c)[(1 + 2 sqrt(lam/mu)) dist + (2/sqrt(mu)) ||e|| + delta (1 + 1/alpha)].

    A zero ``delta`` drops the last term whatever ``alpha`` is.
    """
    if c >= 1.0:
        raise VacuousBoundError(f"c = {c} >= 1")
    if c < 0 or not (lam > 0 and mu > 0):
        raise ValueError("need c >= 0 and positive lam, mu")
    if dist_zer < 0 or err_norm < 0 or delta < 0:
        raise ValueError("dist_zer, err_norm and delta must be nonnegative")
    delta_term = 0.0
    if delta > 0:
        if not alpha:
            raise ValueError("a positive delta needs a positive alpha")
        delta_term = delta * (1.0 + 1.0 / alpha)
    inner = (1.0 + 2.0 * math.sqrt(lam / mu)) * dist_zer + (2.0 / math.sqrt(mu)) * err_norm
    return (1.0 + c) * (inner + delta_term)


@dataclass
class Certificate:
    alpha: float | None
    alpha_provenance: str
    delta: float | None
    delta_provenance: str
    mu: float
    mu_samples: int
    lam: float
    lam_tol: float
    gamma_window: list | None
    gamma: float
    c: float
    epsilon: float | None
    seed: int
    alpha_declared: float | None = None
    delta_at_solution: float | None = None

    def __post_init__(self):
        if self.c < 0:
            raise CertificateError("c must be nonnegative")
        if self.epsilon is not None and self.epsilon < 0:
            raise CertificateError("epsilon must be nonnegative")
        if self.mu > self.lam + 1e-9:
            raise CertificateError(f"mu_hat {self.mu} exceeds lambda {self.lam}")

    def contraction_at(self, gamma):
        return contraction_constant(self.alpha, gamma, self.mu, self.lam)

    def to_dict(self):
        alpha = {"value": self.alpha, "provenance": self.alpha_provenance}
        if self.alpha_declared is not None:
            alpha["declared"] = self.alpha_declared
        delta = {"value": self.delta, "provenance": self.delta_provenance}
        if self.delta_at_solution is not None:
            delta["at_solution"] = self.delta_at_solution
        return {
            "alpha": alpha,
            "delta": delta,
            "mu": {"value": self.mu, "samples": self.mu_samples},
            "lambda": {"value": self.lam, "tol": self.lam_tol},
            "gamma_window": None if self.gamma_window is None else list(self.gamma_window),
            "gamma": self.gamma,
            "c": self.c,
            "epsilon": self.epsilon,
            "seed": self.seed,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d):
        return cls(
            alpha=d["alpha"]["value"],
            alpha_provenance=d["alpha"]["provenance"],
            delta=d["delta"]["value"],
            delta_provenance=d["delta"]["provenance"],
            mu=d["mu"]["value"],
            mu_samples=d["mu"]["samples"],
            lam=d["lambda"]["value"],
            lam_tol=d["lambda"]["tol"],
            gamma_window=d["gamma_window"],
            gamma=d["gamma"],
            c=d["c"],
            epsilon=d["epsilon"],
            seed=d["seed"],
            alpha_declared=d["alpha"].get("declared"),
            delta_at_solution=d["delta"].get("at_solution"),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_certificate(op, prior, sampler, gamma=None, mu_sampler=None, lam_tol=1e-10,
                      dist_zer=0.0, err_norm=0.0):
    """Assemble lambda, alpha, delta, mu, the step window, c and epsilon.

    Args:
        op: measurement operator.
        prior: denoiser.
        sampler: pairs for the Lipschitz and delta estimates (and for mu
            unless ``mu_sampler`` is given).
        gamma: step size; defaults to the geometric mean of the window, else 1/lambda.
        mu_sampler: separate pair source for mu.
        lam_tol: power-iteration tolerance.
        dist_zer, err_norm: inputs to epsilon.
    """
    lam = spectral_norm(op, tol=lam_tol).value
    declared = None
    if prior.exact_alpha:
        alpha, alpha_prov = prior.alpha, "declared"
    else:
        alpha = estimate_lipschitz(prior.residual, sampler).value
        alpha_prov = "estimated"
        declared = prior.alpha
    if prior.delta is not None:
        delta, delta_prov = float(prior.delta), "declared"
    else:
        delta = 0.0
        for x, z in sampler.blocks():
            for v in (x, z):
                delta = max(delta, float(np.max(np.linalg.norm(prior.residual(v), axis=-1))))
        delta_prov = "estimated"
    mu_est = estimate_srec_mu(op, prior, mu_sampler or sampler)
    mu = mu_est.value
    window = step_size_window(alpha, mu, lam)
    if gamma is None:
        gamma = default_gamma("pnp", lam, window=window)
    c = contraction_constant(alpha, gamma, mu, lam)
    epsilon = None
    if c < 1.0:
        try:
            epsilon = error_bound_epsilon(c, lam, mu, dist_zer, err_norm, delta, alpha)
        except ValueError:
            epsilon = None
    return Certificate(alpha, alpha_prov, delta, delta_prov, mu, mu_est.pairs, lam, lam_tol,
                       window.as_list(), gamma, c, epsilon, sampler.seed, alpha_declared=declared)


@dataclass
class TheoremReport:
    theorem: str
    status: str  # pass | fail | vacuous | precondition-unmet
    worst_margin: float = math.nan
    violations: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.status == "pass"

    def to_dict(self):
        return asdict(self)


def _oracle_gaps(trace):
    gaps = trace.gaps()
    if not len(gaps) or np.any(np.isnan(gaps)):
        raise ValueError("trace has no oracle gaps")
    return gaps


def check_theorem1(trace, cert, slack_rel=1e-9):
    """gap_t <= c gap_{t-1} and gap_t <= c^t gap_0, each up to 1e-9 (1 + gap_0)."""
    gaps = _oracle_gaps(trace)
    c = cert.contraction_at(trace.gamma)
    if c >= 1.0:
        return TheoremReport("theorem1", "vacuous", details={"c": c})
    slack = slack_rel * (1.0 + gaps[0])
    t = np.arange(len(gaps))
    step = gaps[1:] - c * gaps[:-1]
    total = gaps - c ** t * gaps[0]
    margins = np.concatenate([step, total])
    violations = int(np.count_nonzero(margins > slack))
    # Ratios of gaps already below the slack are rounding noise.
    resolved = gaps[:-1] > slack
    ratios = gaps[1:][resolved] / gaps[:-1][resolved]
    return TheoremReport(
        "theorem1", "pass" if violations == 0 else "fail", float(margins.max()), violations,
        {"c": c, "slack": slack, "worst_ratio": float(ratios.max()) if len(ratios) else 0.0,
         "resolved_steps": int(resolved.sum())},
    )


def check_theorem2(trace, cert, dist_zer, err_norm, delta=None, epsilon=None, slack_rel=1e-9):
    """gap_t <= c^t gap_0 + eps (1 - c^t)/(1 - c) up to 1e-9 (1 + gap_0).

    ``delta`` overrides the certificate's bound (e.g. the at-solution residual);
    ``epsilon`` overrides the computed radius, which negative controls use.
    """
    gaps = _oracle_gaps(trace)
    c = cert.contraction_at(trace.gamma)
    if c >= 1.0:
        return TheoremReport("theorem2", "vacuous", details={"c": c})
    if epsilon is None:
        d = cert.delta if delta is None else delta
        epsilon = error_bound_epsilon(c, cert.lam, cert.mu, dist_zer, err_norm, d, cert.alpha)
    slack = slack_rel * (1.0 + gaps[0])
    ct = c ** np.arange(len(gaps))
    bound = ct * gaps[0] + epsilon * (1.0 - ct) / (1.0 - c)
    margins = gaps - bound
    violations = int(np.count_nonzero(margins > slack))
    return TheoremReport(
        "theorem2", "pass" if violations == 0 else "fail", float(margins.max()), violations,
        {"c": c, "epsilon": epsilon, "asymptote": epsilon / (1.0 - c), "slack": slack},
    )


def check_theorem3(problem, prior, config=None, tol=1e-6, rel_tol=1e-5, red_config=None):
    """Run PnP and RED from the same start and compare their limits.

    Args:
        problem: inverse problem; noisy problems are reported as precondition-unmet.
        prior: denoiser.
        config: PnP solver config (also used for RED unless ``red_config`` is given).
        tol: bound on the terminal ||R|| and ||grad g|| of both runs.
        rel_tol: bound on ||x_pnp - x_red|| / ||x_pnp||.
        red_config: RED solver config.
    """
    config = config or SolverConfig()
    red_config = red_config or config
    try:
        tp = pnp_pgm(problem, prior, config)
        tr = sd_red(problem, prior, red_config)
    except DivergenceError as exc:
        return TheoremReport("theorem3", "fail", details={"error": str(exc)})
    xp, xr = tp.x, tr.x
    disc = float(np.linalg.norm(xp - xr) / max(np.linalg.norm(xp), 1e-300))
    norms = {
        "pnp_res_R": float(np.linalg.norm(prior.residual(xp))),
        "pnp_grad_g": float(np.linalg.norm(grad_datafit(problem, xp))),
        "red_res_R": float(np.linalg.norm(prior.residual(xr))),
        "red_grad_g": float(np.linalg.norm(grad_datafit(problem, xr))),
    }
    details = {"discrepancy": disc, "pnp_iters": tp.iterations, "red_iters": tr.iterations,
               "same_x0": bool(np.array_equal(tp.x0, tr.x0)), **norms}
    if not problem.noiseless:
        return TheoremReport("theorem3", "precondition-unmet", disc, 0, details)
    checks = [disc - rel_tol] + [v - tol for v in norms.values()]
    violations = sum(m > 0 for m in checks)
    return TheoremReport("theorem3", "pass" if violations == 0 else "fail",
                         float(max(checks)), violations, details)
