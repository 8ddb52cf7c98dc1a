"""Randomized pairwise checkers for Lipschitz, cocoercive and averaged maps."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linops import as_array


@dataclass
class PropertyReport:
    name: str
    pairs: int
    violations: int
    worst_margin: float
    witness: int | None = None  # index of the worst violating pair
    status: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.status:
            self.status = "pass" if self.violations == 0 else "fail"

    @property
    def passed(self):
        return self.status == "pass"

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())


def _as_pairs(pairs):
    if hasattr(pairs, "pairs"):
        return pairs.pairs()
    x, z = pairs
    return np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(z, dtype=np.float64))


def _report(name, margins, details=None, valid=None):
    """Margins > 0 are violations."""
    margins = np.asarray(margins, dtype=np.float64)
    if valid is not None:
        margins = np.where(valid, margins, -np.inf)
    violations = int(np.count_nonzero(margins > 0))
    worst = int(np.argmax(margins)) if len(margins) else None
    worst_margin = float(margins[worst]) if worst is not None else math.nan
    return PropertyReport(name, len(margins), violations, worst_margin,
                          worst if violations else None, details=details or {})


def _row_dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def check_lipschitz(mapping, L, pairs, tol=1e-9):
    """||T(x) - T(z)|| <= L ||x - z|| (1 + tol) for every pair.

    The margin is the ratio ||T(x) - T(z)|| / ||x - z|| minus L (1 + tol).
    """
    x, z = _as_pairs(pairs)
    num = np.linalg.norm(mapping(x) - mapping(z), axis=-1)
    den = np.linalg.norm(x - z, axis=-1)
    valid = den > 0
    ratio = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
    rep = _report(f"lipschitz(L={L:g})", ratio - L * (1.0 + tol), {"max_ratio": float(ratio.max())},
                  valid)
    return rep


def check_nonexpansive(mapping, pairs, tol=1e-9):
    rep = check_lipschitz(mapping, 1.0, pairs, tol)
    rep.name = "nonexpansive"
    return rep


def check_cocoercive(mapping, beta, pairs, tol=1e-9):
    """<T(x) - T(z), x - z> >= beta ||T(x) - T(z)||^2 (1 - tol).

    Margins are normalized by ||x - z||^2 so they are scale free.
    """
    x, z = _as_pairs(pairs)
    dt = mapping(x) - mapping(z)
    h = x - z
    scale = np.maximum(_row_dot(h, h), 1e-300)
    margin = (beta * _row_dot(dt, dt) * (1.0 - tol) - _row_dot(dt, h)) / scale
    return _report(f"cocoercive(beta={beta:g})", margin)


def check_strongly_monotone(mapping, theta, pairs, tol=1e-9):
    """<T(x) - T(z), x - z> >= theta ||x - z||^2 (1 - tol)."""
    x, z = _as_pairs(pairs)
    dt = mapping(x) - mapping(z)
    h = x - z
    scale = np.maximum(_row_dot(h, h), 1e-300)
    margin = (theta * _row_dot(h, h) * (1.0 - tol) - _row_dot(dt, h)) / scale
    return _report(f"strongly-monotone(theta={theta:g})", margin)


def averaged_parameter(alpha):
    """a = alpha / (1 + alpha)."""
    return alpha / (1.0 + alpha)


def check_averaged(mapping, pairs, a=None, alpha=None, tol=1e-9):
    """Averagedness inequality for the map T with parameter a in (0, 1).

    ||T x - T z||^2 + (1 - 2a) ||x - z||^2 <= 2 (1 - a) <T x - T z, x - z>.
    With ``alpha`` given instead of ``a`` the map tested is T = D / (1 + alpha)
    at a = alpha / (1 + alpha), the form implied by an alpha-Lipschitz residual.
    """
    if (a is None) == (alpha is None):
        raise ValueError("give exactly one of a or alpha")
    if alpha is not None:
        a = averaged_parameter(alpha)
        base = mapping

        def mapping(v):
            return base(v) / (1.0 + alpha)

    if not 0.0 < a < 1.0:
        raise ValueError("a must lie in (0, 1)")
    x, z = _as_pairs(pairs)
    dt = mapping(x) - mapping(z)
    h = x - z
    hh = _row_dot(h, h)
    scale = np.maximum(hh, 1e-300)
    lhs = _row_dot(dt, dt) + (1.0 - 2.0 * a) * hh
    rhs = 2.0 * (1.0 - a) * _row_dot(dt, h)
    return _report(f"averaged(a={a:g})", (lhs - rhs) / scale - tol)


def check_rsc_srec_equiv(op, pairs, mu, tol=1e-10, y=None, seed=0):
    """S-REC and restricted strong convexity agree pair by pair.

    First the exact identity g(z) - g(x) - <grad g(x), z - x> = 0.5 ||A(z - x)||^2
    is checked to relative ``tol``; then the two inequalities
    ||A(x - z)||^2 >= mu ||x - z||^2 and
    g(z) >= g(x) + <grad g(x), z - x> + (mu/2) ||z - x||^2
    must pass or fail together. A pair violates the check when the identity
    fails, when either inequality fails or when they disagree; ``details``
    records how many pairs pass each form and how many disagree.
    """
    x, z = _as_pairs(pairs)
    if y is None:
        y = np.random.default_rng(seed).standard_normal(op.out_dim)

    def g(v):
        r = op.forward(v) - y
        return 0.5 * np.sum(r * r, axis=-1)

    grad_x = op.adjoint(op.forward(x) - y)
    h = z - x
    ah = op.forward(h)
    quad = 0.5 * np.sum(ah * ah, axis=-1)
    bregman = g(z) - g(x) - _row_dot(grad_x, h)
    ident_err = np.abs(bregman - quad) / np.maximum(np.abs(quad) + np.abs(g(z)) + np.abs(g(x)), 1e-300)
    hh = _row_dot(h, h)
    srec_gap = 2.0 * quad - mu * hh
    rsc_gap = bregman - 0.5 * mu * hh
    fuzz = tol * (2.0 * quad + mu * hh + 1e-300)
    srec = srec_gap >= -fuzz
    rsc = rsc_gap >= -fuzz
    disagree = srec != rsc
    scale = np.maximum(hh, 1e-300)
    margin = np.maximum.reduce([
        ident_err - tol,
        np.where(srec, -1.0, -srec_gap / scale),
        np.where(rsc, -1.0, -rsc_gap / scale),
        np.where(disagree, 1.0, -1.0),
    ])
    rep = _report("rsc-srec-equivalence", margin, {
        "max_identity_error": float(ident_err.max()),
        "srec_pass": int(srec.sum()),
        "rsc_pass": int(rsc.sum()),
        "disagreements": int(disagree.sum()),
    })
    return rep


def check_gradstep_contraction(op, gamma, mu, lam, pairs, tol=1e-9):
    """||(I - gamma A^T A)(x - z)|| <= max{|1 - gamma mu|, |1 - gamma lam|} ||x - z||."""
    factor = max(abs(1.0 - gamma * mu), abs(1.0 - gamma * lam))

    def step(v):
        return v - gamma * op.normal(v)

    rep = check_lipschitz(step, factor, pairs, tol)
    rep.name = f"gradstep-contraction(gamma={gamma:g})"
    rep.details["factor"] = factor
    return rep


def check_composite_fixedpoints(D, S, contraction_c, starts, common=None, iters=2000, tol=1e-8):
    """Fixed points of T = D.S coincide with common fixed points of D and S.

    Args:
        D, S: batched maps.
        contraction_c: contraction constant of T over Im(D); >= 1 (or None)
            makes the check inapplicable.
        starts: array (s, n) of starting points, pushed through D first.
        common: a known common fixed point; without one the nonempty
            intersection cannot be confirmed and no assertion is made.
        iters: iterations of T.
        tol: tolerance on the distance to ``common`` and on both
            fixed-point residuals.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    if contraction_c is None or contraction_c >= 1.0:
        return PropertyReport("composite-fixedpoints", len(starts), 0, math.nan,
                              status="precondition-unmet",
                              details={"reason": "T is not certified as a contraction"})
    if common is None:
        return PropertyReport("composite-fixedpoints", len(starts), 0, math.nan,
                              status="precondition-unmet",
                              details={"reason": "nonempty Fix(D) and Fix(S) intersection unverifiable"})
    common = np.asarray(as_array(common), dtype=np.float64)
    x = D(starts)
    for _ in range(iters):
        x_new = D(S(x))
        done = np.max(np.linalg.norm(x_new - x, axis=-1)) <= 1e-15 * (1.0 + np.max(np.abs(x)))
        x = x_new
        if done:
            break
    dist = np.linalg.norm(x - common, axis=-1)
    res_d = np.linalg.norm(D(x) - x, axis=-1)
    res_s = np.linalg.norm(S(x) - x, axis=-1)
    scale = 1.0 + np.linalg.norm(common)
    margin = np.maximum.reduce([dist, res_d, res_s]) / scale - tol
    return _report("composite-fixedpoints", margin, {
        "max_distance": float(dist.max()),
        "max_res_D": float(res_d.max()),
        "max_res_S": float(res_s.max()),
    })
