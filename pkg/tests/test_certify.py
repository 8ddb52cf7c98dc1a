import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_subspace_oracle
from pnpcert.certify import (
    BLOCK_SIZE,
    Certificate,
    CertificateError,
    Histogram,
    PairSampler,
    VacuousBoundError,
    build_certificate,
    check_theorem1,
    check_theorem2,
    check_theorem3,
    error_bound_epsilon,
    estimate_lipschitz,
    estimate_srec_mu,
)
from pnpcert.linops import DenseOp, IdentityOp, make_gaussian_block_operator
from pnpcert.priors import (
    IdentityPrior,
    load_conv_residual_prior,
    make_scaled_prior,
    project_zer_r,
    save_conv_residual_weights,
)
from pnpcert.solvers import Problem, SolverConfig, SolverTrace, pnp_pgm, step_size_window

SPEC_KEYS = {"alpha", "delta", "mu", "lambda", "gamma_window", "gamma", "c", "epsilon", "seed"}


class ZeroDenoiser:
    n = 8

    def denoise(self, x):
        return np.zeros_like(x)


def crafted_trace(gaps, gamma):
    t = SolverTrace("pnp", gamma)
    t.iters = list(range(len(gaps)))
    t.gap = list(gaps)
    return t


@pytest.fixture(scope="module")
def oracle_cert(oracle):
    return build_certificate(oracle.op, oracle.prior, oracle.subspace_sampler(2000))


def test_sampler_validation():
    with pytest.raises(ValueError):
        PairSampler("awgn-pairs", dim=4, count=1)
    with pytest.raises(ValueError):
        PairSampler("bogus", dim=4)
    with pytest.raises(ValueError):
        PairSampler("subspace-pairs", dim=4)
    with pytest.raises(ValueError):
        PairSampler("awgn-pairs")


def test_sampler_prefix_is_count_independent():
    small = PairSampler("image-space-pairs", dim=6, count=BLOCK_SIZE + 10, seed=3).pairs()
    big = PairSampler("image-space-pairs", dim=6, count=3 * BLOCK_SIZE, seed=3).pairs()
    assert np.array_equal(small[0], big[0][:BLOCK_SIZE + 10])
    assert np.array_equal(small[1], big[1][:BLOCK_SIZE + 10])
    other = PairSampler("image-space-pairs", dim=6, count=10, seed=4).pairs()
    assert not np.array_equal(other[0], big[0][:10])


def test_awgn_pairs_share_base():
    base = np.linspace(0, 1, 16)
    x, z = PairSampler("awgn-pairs", [base], sigmas=(1e-3,), count=50).pairs()
    assert np.max(np.abs(x - base)) < 0.01 and np.max(np.abs(z - base)) < 0.01


def test_histogram_layout():
    r = np.array([0.1, 0.5, 1.0])
    h = Histogram.of(r)
    assert len(h.counts) == 50 and h.counts.sum() == 3
    assert h.edges[0] == 0.0 and h.edges[-1] == pytest.approx(1.1)
    assert Histogram.of(np.zeros(4)).edges[-1] == 1.0


def test_lipschitz_of_identity_residual_is_zero():
    est = estimate_lipschitz(IdentityPrior((8,)).residual, PairSampler("awgn-pairs", dim=8, count=100))
    assert est.value == 0.0 and np.all(est.ratios == 0.0)


def test_lipschitz_scaled_projector(oracle):
    prior = make_scaled_prior(oracle.prior, 0.5)
    sampler = PairSampler("awgn-pairs", dim=oracle.op.n, count=1000, seed=1)
    est = estimate_lipschitz(prior.residual, sampler)
    assert 0.45 <= est.value <= 0.5 + 1e-9
    # Dense-projector oracle for each ratio.
    x, z = sampler.pairs()
    comp = np.eye(oracle.op.n) - oracle.basis @ oracle.basis.T
    h = x - z
    dense = 0.5 * np.linalg.norm(h @ comp, axis=1) / np.linalg.norm(h, axis=1)
    assert np.max(np.abs(dense - est.ratios)) <= 1e-12
    assert estimate_lipschitz(prior.denoise, sampler).value <= 1 + 1e-9


def test_degenerate_pairs_raise():
    sampler = PairSampler("awgn-pairs", dim=8, count=10)
    with pytest.raises(CertificateError):
        estimate_srec_mu(IdentityOp(8), ZeroDenoiser(), sampler)


def test_mu_of_identity_op(oracle):
    est = estimate_srec_mu(IdentityOp(oracle.op.n), oracle.prior, oracle.subspace_sampler(200))
    assert abs(est.value - 1.0) <= 1e-12 and est.note == "empirical lower bound"


def test_mu_oracle_range_and_upper_bound(oracle):
    est = estimate_srec_mu(oracle.op, oracle.prior, oracle.subspace_sampler(2000))
    assert 0.25 <= est.value <= 0.75
    assert est.value >= oracle.mu_exact - 1e-12
    assert est.pairs == 2000 and est.skipped == 0


@pytest.mark.xfail(strict=True, reason="2000 pairs leave mu_hat about 0.09 above the exact restricted eigenvalue")
def test_mu_oracle_within_005_at_2000_pairs(oracle):
    est = estimate_srec_mu(oracle.op, oracle.prior, oracle.subspace_sampler(2000))
    assert est.value - oracle.mu_exact <= 0.05


def test_mu_monotone_in_count(oracle):
    prev = math.inf
    for count in (500, 2000, 8000):
        value = estimate_srec_mu(oracle.op, oracle.prior, oracle.subspace_sampler(count)).value
        assert value <= prev
        prev = value


def test_mu_grows_with_sampling_ratio(oracle):
    low = make_gaussian_block_operator(256, 0.1, seed=0)
    sampler = oracle.subspace_sampler(2000)
    assert estimate_srec_mu(oracle.op, oracle.prior, sampler).value > estimate_srec_mu(low, oracle.prior, sampler).value


def test_epsilon_examples():
    assert error_bound_epsilon(0.5, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0) == 0.0
    assert error_bound_epsilon(0.5, 1.0, 0.25, 0.1, 0.2, 0.0, 1.0) == pytest.approx(1.95, abs=1e-12)
    assert error_bound_epsilon(0.0, 1.0, 1.0, 0.0, 0.0, 0.3, 0.5) == pytest.approx(0.9, abs=1e-12)
    with pytest.raises(VacuousBoundError):
        error_bound_epsilon(1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        error_bound_epsilon(0.5, 1.0, 1.0, 0.0, 0.0, 0.1, 0.0)


@settings(max_examples=200, deadline=None)
@given(c=st.floats(0, 0.999), lam=st.floats(0.1, 10), mu_frac=st.floats(0.01, 1),
       dist=st.floats(0, 5), err=st.floats(0, 5), delta=st.floats(0, 5), alpha=st.floats(0.01, 5))
def test_epsilon_formula(c, lam, mu_frac, dist, err, delta, alpha):
    mu = mu_frac * lam
    expect = (1 + c) * ((1 + 2 * (lam / mu) ** 0.5) * dist + 2 * err / mu ** 0.5 + delta * (alpha + 1) / alpha)
    got = error_bound_epsilon(c, lam, mu, dist, err, delta, alpha)
    assert got == pytest.approx(expect, rel=1e-12, abs=1e-300)
    assert got >= 0


def test_certificate_identity_limit():
    cert = build_certificate(IdentityOp(8), IdentityPrior((8,)), PairSampler("awgn-pairs", dim=8, count=100))
    assert cert.alpha == 0.0 and cert.alpha_provenance == "declared"
    assert cert.mu == pytest.approx(1.0, abs=1e-12)
    assert cert.lam == pytest.approx(1.0, abs=1e-9)
    assert cert.gamma_window == pytest.approx([0.0, 2.0])
    assert cert.c < 1.0 and cert.epsilon == 0.0


def test_certificate_oracle_contracts(oracle_cert):
    assert oracle_cert.alpha == 1.0 and oracle_cert.alpha_provenance == "declared"
    assert oracle_cert.delta_provenance == "estimated"
    assert oracle_cert.gamma_window is not None
    lo, hi = oracle_cert.gamma_window
    assert lo < oracle_cert.gamma < hi
    assert oracle_cert.c < 1.0
    assert oracle_cert.contraction_at(oracle_cert.gamma) == oracle_cert.c


def test_certificate_conv_prior(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "w.pnpw"
    save_conv_residual_weights(path, [(rng.standard_normal((3, 1, 3, 3)), np.zeros(3), 1.0),
                                      (rng.standard_normal((1, 3, 3, 3)), np.zeros(1), 0.8)], 0.8)
    prior = load_conv_residual_prior(path, (8, 8), norm_tol=1e-9, norm_max_iters=20000)
    cert = build_certificate(IdentityOp(64), prior, PairSampler("awgn-pairs", dim=64, count=500))
    assert cert.alpha <= 0.8 and cert.alpha_provenance == "estimated"
    assert cert.to_dict()["alpha"]["declared"] == pytest.approx(0.8)


def test_certificate_json_roundtrip(oracle_cert):
    text = oracle_cert.to_json()
    d = json.loads(text)
    assert set(d) == SPEC_KEYS
    assert Certificate.from_json(text) == oracle_cert
    assert Certificate.from_json(text).to_json() == text


def test_certificate_invariants():
    base = dict(alpha=1.0, alpha_provenance="declared", delta=0.0, delta_provenance="declared",
                mu=0.5, mu_samples=10, lam=1.0, lam_tol=1e-10, gamma_window=None, gamma=1.0,
                c=0.5, epsilon=0.0, seed=0)
    Certificate(**base)
    for bad in ({"mu": 1.1}, {"c": -0.1}, {"epsilon": -1.0}):
        with pytest.raises(CertificateError):
            Certificate(**{**base, **bad})


def test_theorem1_oracle_run(oracle, oracle_cert):
    trace = pnp_pgm(oracle.problem, oracle.prior, SolverConfig(gamma=oracle_cert.gamma, max_iters=500, tol=0.0))
    report = check_theorem1(trace, oracle_cert)
    assert report.passed, report
    assert report.details["worst_ratio"] <= oracle_cert.c


def test_theorem1_outside_window_is_vacuous(oracle, oracle_cert):
    trace = pnp_pgm(oracle.problem, oracle.prior, SolverConfig(gamma=1.0, max_iters=20, tol=0.0))
    report = check_theorem1(trace, oracle_cert)
    assert report.status == "vacuous" and report.violations == 0


def test_theorem1_identity_prior_gradient_descent():
    rng = np.random.default_rng(5)
    a = np.eye(16) + 0.3 * rng.standard_normal((16, 16)) / 4
    op = DenseOp(a)
    eig = np.linalg.eigvalsh(a.T @ a)
    x = rng.standard_normal(16)
    gamma = 1.0 / eig.max()
    cert = Certificate(0.0, "declared", 0.0, "declared", float(eig.min()), 0, float(eig.max()), 0.0,
                       [0.0, 2.0 / eig.max()], gamma, 1 - eig.min() / eig.max(), 0.0, 0)
    trace = pnp_pgm(Problem.from_truth(op, x), IdentityPrior((16,)), SolverConfig(gamma=gamma, max_iters=300, tol=0.0))
    assert check_theorem1(trace, cert).passed


def test_theorem1_rejects_crafted_violation(oracle_cert):
    c = oracle_cert.c
    gaps = [1.0, c, c * c * 1.01, c ** 3]
    report = check_theorem1(crafted_trace(gaps, oracle_cert.gamma), oracle_cert)
    assert report.status == "fail" and report.violations >= 1


def test_theorem_checks_need_oracle(oracle_cert):
    t = crafted_trace([math.nan, math.nan], oracle_cert.gamma)
    with pytest.raises(ValueError):
        check_theorem1(t, oracle_cert)


def theorem2_setup(seed=7):
    o = make_subspace_oracle(seed)
    rng = np.random.default_rng([seed, 5])
    s = o.x_true
    w = o.prior.residual(rng.standard_normal(o.op.n))
    w *= 0.05 * np.linalg.norm(s) / np.linalg.norm(w)
    x_star = s + w
    y0 = o.op.forward(x_star)
    e = rng.standard_normal(o.op.out_dim)
    e *= 0.01 * np.linalg.norm(y0) / np.linalg.norm(e)
    problem = Problem.from_truth(o.op, x_star, noise=e)
    cert = build_certificate(o.op, o.prior, o.subspace_sampler(2000))
    dist = project_zer_r(o.prior, x_star).distance(x_star)
    return o, problem, cert, dist, float(np.linalg.norm(e)), float(np.linalg.norm(w))


def test_theorem2_noisy_off_subspace():
    o, problem, cert, dist, err, wnorm = theorem2_setup()
    assert abs(dist - wnorm) <= 1e-12
    trace = pnp_pgm(problem, o.prior, SolverConfig(gamma=cert.gamma, max_iters=500, tol=0.0))
    at_solution = float(np.linalg.norm(o.prior.residual(trace.x)))
    for delta in (cert.delta, at_solution):
        report = check_theorem2(trace, cert, dist, err, delta=delta)
        assert report.passed, report


def test_theorem2_reduces_to_theorem1(oracle, oracle_cert):
    trace = pnp_pgm(oracle.problem, oracle.prior, SolverConfig(gamma=oracle_cert.gamma, max_iters=200, tol=0.0))
    r2 = check_theorem2(trace, oracle_cert, 0.0, 0.0, delta=0.0)
    assert r2.passed and r2.details["epsilon"] == 0.0


def test_theorem2_halved_epsilon_rejected(oracle_cert):
    c = oracle_cert.c
    eps = 0.1
    asym = eps / (1 - c)
    t = np.arange(200)
    gaps = 0.75 * asym + (1.0 - 0.75 * asym) * c ** t
    trace = crafted_trace(gaps, oracle_cert.gamma)
    assert check_theorem2(trace, oracle_cert, 0, 0, epsilon=eps).passed
    report = check_theorem2(trace, oracle_cert, 0, 0, epsilon=eps / 2)
    assert report.status == "fail" and report.violations > 0


def test_theorem2_vacuous(oracle_cert):
    trace = crafted_trace([1.0, 1.0], 10.0)
    assert check_theorem2(trace, oracle_cert, 0, 0).status == "vacuous"


def test_theorem3_subspace(oracle):
    report = check_theorem3(oracle.problem, oracle.prior, SolverConfig(gamma=1.0, max_iters=5000, tol=1e-13),
                            red_config=SolverConfig(max_iters=5000, tol=1e-13))
    assert report.passed, report
    assert report.details["same_x0"]


def test_theorem3_identity_prior():
    rng = np.random.default_rng(1)
    op = DenseOp(np.eye(12) + 0.2 * rng.standard_normal((12, 12)) / 3)
    p = Problem.from_truth(op, rng.standard_normal(12))
    report = check_theorem3(p, IdentityPrior((12,)), SolverConfig(gamma=0.5, max_iters=3000, tol=1e-15))
    assert report.details["discrepancy"] <= 1e-12
    assert report.passed


def test_theorem3_noisy_is_precondition_unmet(oracle):
    e = 0.01 * np.random.default_rng(2).standard_normal(oracle.op.out_dim)
    p = Problem.from_truth(oracle.op, oracle.x_true, noise=e)
    report = check_theorem3(p, oracle.prior, SolverConfig(gamma=1.0, max_iters=200))
    assert report.status == "precondition-unmet"
    assert math.isfinite(report.details["discrepancy"])


def test_window_matches_certificate(oracle_cert):
    w = step_size_window(oracle_cert.alpha, oracle_cert.mu, oracle_cert.lam)
    assert w.as_list() == oracle_cert.gamma_window
