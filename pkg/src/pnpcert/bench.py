"""Config-driven experiment runner for patch-based CS and radial CS-MRI."""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .certify import PairSampler, build_certificate, estimate_lipschitz
from .imageio import load_pgm
from .linops import (
    PatchBlockOp,
    Signal,
    as_array,
    lines_for_ratio,
    load_dense_operator,
    make_gaussian_block_operator,
    make_radial_fourier_operator,
    spectral_norm,
)
from .phantoms import make_phantom
from .priors import (
    IdentityPrior,
    lowest_frequencies,
    load_conv_residual_prior,
    make_scaled_prior,
    make_subspace_projector,
    make_tv_prox_prior,
)
from .solvers import Problem, SolverConfig, default_gamma, grad_datafit, pnp_pgm, sd_red

METRICS_COLUMNS = ("experiment_id", "repetition", "psnr", "gap", "iterations", "wall_time",
                   "res_R", "grad_g")
PSNR_SENTINEL = 300.0
PIPELINES = ("patch-cs", "cs-mri")


class ConfigError(ValueError):
    pass


def psnr(x, ref, peak=None):
    """10 log10(peak^2 / MSE); identical inputs give the 300 dB sentinel.

    ``peak`` defaults to the reference Signal's peak, else 1.
    """
    if peak is None:
        peak = ref.peak if isinstance(ref, Signal) else 1.0
    if not peak > 0:
        raise ValueError("peak must be positive")
    a, b = as_array(x), as_array(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(peak * peak / mse)


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


_SCHEMA = {
    "experiment": {"id": str, "pipeline": str, "repetitions": int, "seed": int},
    "problem": {"ratio": float, "num_lines": int, "patch": int, "operator": str, "path": str},
    "image": {"source": str, "phantom": str, "height": int, "width": int, "k": int,
              "count": int, "seed": int, "path": str},
    "prior": {"kind": str, "k": int, "theta": float, "weight": float, "dual_iters": int,
              "path": str},
    "solver": {"algorithm": str, "gamma": float, "tau": float, "max_iters": int, "tol": float,
               "accelerate": _bool, "init": str},
    "noise": {"sigma": float},
    "certify": {"enabled": _bool, "pairs": int, "mu_pairs": int},
    "output": {"dir": str, "timing": _bool},
    "grid": {"ratios": _floats, "num_lines": _floats, "workers": int},
}


@dataclass
class ExperimentConfig:
    """Parsed experiment description; ``sections`` maps section -> typed values."""

    sections: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def experiment_id(self):
        return self.get("experiment", "id", "experiment")

    @property
    def pipeline(self):
        return self.get("experiment", "pipeline", "patch-cs")

    @property
    def seed(self):
        return self.get("experiment", "seed", 0)

    @property
    def repetitions(self):
        return self.get("experiment", "repetitions", 1)

    def with_values(self, section, **values):
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections.setdefault(section, {}).update(values)
        return replace(self, sections=sections)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def parse_config(text, base_dir=None):
    """Parse ``key = value`` lines under ``[section]`` headers; unknown names are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {}
    for name in parser.sections():
        if name not in _SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        schema = _SCHEMA[name]
        values = {}
        for key, raw in parser.items(name):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                values[key] = schema[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
        sections[name] = values
    cfg = ExperimentConfig(sections, Path(base_dir) if base_dir else Path.cwd())
    validate_config(cfg)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def validate_config(cfg):
    if cfg.pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}")
    if cfg.repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    ratio = cfg.get("problem", "ratio")
    if ratio is not None and not 0.0 < ratio <= 1.0:
        raise ConfigError("problem ratio must lie in (0, 1]")
    for section, key in (("image", "path"), ("prior", "path"), ("problem", "path")):
        p = cfg.get(section, key)
        if p is not None and not cfg.resolve(p).is_file():
            raise ConfigError(f"[{section}] {key}: file {p} does not exist")
    source = cfg.get("image", "source", "phantom")
    if source not in ("phantom", "file"):
        raise ConfigError("image source must be 'phantom' or 'file'")
    if source == "file" and cfg.get("image", "path") is None:
        raise ConfigError("image source 'file' needs a path")
    kind = cfg.get("prior", "kind", "identity")
    if kind not in ("identity", "subspace", "scaled", "tv-prox", "conv-residual"):
        raise ConfigError(f"unknown prior kind {kind!r}")
    if kind == "conv-residual" and cfg.get("prior", "path") is None:
        raise ConfigError("conv-residual prior needs a weights path")
    if cfg.get("solver", "algorithm", "pnp") not in ("pnp", "red"):
        raise ConfigError("solver algorithm must be 'pnp' or 'red'")
    if cfg.get("solver", "init", "adjoint-through-prior") not in ("adjoint-through-prior", "zero"):
        raise ConfigError("solver init must be 'adjoint-through-prior' or 'zero'")
    if cfg.get("noise", "sigma", 0.0) < 0:
        raise ConfigError("noise sigma must be nonnegative")
    op_kind = cfg.get("problem", "operator", "gaussian-block")
    if cfg.pipeline == "patch-cs" and op_kind not in ("gaussian-block", "dense-file"):
        raise ConfigError("patch-cs operator must be 'gaussian-block' or 'dense-file'")
    if op_kind == "dense-file" and cfg.get("problem", "path") is None:
        raise ConfigError("dense-file operator needs a path")


def _oracle_image(cfg):
    if cfg.get("image", "source", "phantom") == "file":
        return load_pgm(cfg.resolve(cfg.get("image", "path")))
    name = cfg.get("image", "phantom", "piecewise-rect")
    shape = (cfg.get("image", "height", 64), cfg.get("image", "width", 64))
    params = {}
    if name == "dct-subspace" and cfg.get("image", "k") is not None:
        params["k"] = cfg.get("image", "k")
    if name == "piecewise-rect" and cfg.get("image", "count") is not None:
        params["count"] = cfg.get("image", "count")
    try:
        return make_phantom(name, shape, cfg.get("image", "seed", cfg.seed), **params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad phantom parameters: {exc}") from exc


def build_prior(cfg, shape):
    kind = cfg.get("prior", "kind", "identity")
    n = int(np.prod(shape))
    if kind == "identity":
        return IdentityPrior(shape)
    if kind in ("subspace", "scaled"):
        base = make_subspace_projector(shape, lowest_frequencies(shape, cfg.get("prior", "k", max(1, n // 16))))
        if kind == "subspace":
            return base
        return make_scaled_prior(base, cfg.get("prior", "theta", 0.5))
    if kind == "tv-prox":
        return make_tv_prox_prior(shape, cfg.get("prior", "weight", 0.05),
                                  cfg.get("prior", "dual_iters", 100))
    return load_conv_residual_prior(cfg.resolve(cfg.get("prior", "path")), shape)


@dataclass
class RunResult:
    experiment_id: str
    repetition: int
    trace: object
    problem: object
    prior: object
    oracle: Signal
    crop: tuple
    wall_time: float
    certificate: object = None
    histograms: dict = field(default_factory=dict)
    padding: tuple = (0, 0)

    def metrics_row(self, timing=False):
        x = self.trace.x
        h, w = self.crop
        x_img = x.reshape(h + self.padding[0], w + self.padding[1])[:h, :w]
        return {
            "experiment_id": self.experiment_id,
            "repetition": self.repetition,
            "psnr": psnr(x_img.reshape(-1), self.oracle.data, self.oracle.peak),
            "gap": float(np.linalg.norm(x - self.problem.x_true)),
            "iterations": self.trace.iterations,
            "wall_time": self.wall_time if timing else None,
            "res_R": float(np.linalg.norm(self.prior.residual(x))),
            "grad_g": float(np.linalg.norm(grad_datafit(self.problem, x))),
        }


def _pad_to_multiple(img, patch):
    h, w = img.shape
    ph, pw = (-h) % patch, (-w) % patch
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "symmetric")
    return img, (ph, pw)


def _build_patch_problem(cfg, rep_seed):
    oracle = _oracle_image(cfg)
    patch = cfg.get("problem", "patch", 33)
    img, padding = _pad_to_multiple(oracle.image(), patch)
    if cfg.get("problem", "operator", "gaussian-block") == "dense-file":
        block = load_dense_operator(cfg.resolve(cfg.get("problem", "path")))
        if block.n != patch * patch:
            raise ConfigError("dense operator width must equal patch**2")
    else:
        block = make_gaussian_block_operator(patch * patch, cfg.get("problem", "ratio", 0.5), rep_seed)
    op = PatchBlockOp(img.shape[0], img.shape[1], patch, block)
    return oracle, img, padding, op


def _build_mri_problem(cfg, rep_seed):
    oracle = _oracle_image(cfg)
    h, w = oracle.shape
    lines = cfg.get("problem", "num_lines")
    if lines is None:
        ratio = cfg.get("problem", "ratio")
        if ratio is None:
            raise ConfigError("cs-mri needs num_lines or ratio")
        lines = lines_for_ratio(h, w, ratio)
    try:
        op = make_radial_fourier_operator(h, w, lines, rep_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return oracle, oracle.image(), (0, 0), op


def _solver_config(cfg):
    accel_default = cfg.pipeline == "cs-mri"
    return SolverConfig(
        gamma=cfg.get("solver", "gamma"),
        tau=cfg.get("solver", "tau", 1.0),
        max_iters=cfg.get("solver", "max_iters", 1000),
        tol=cfg.get("solver", "tol", 1e-9),
        accelerate=cfg.get("solver", "accelerate", accel_default),
        init=cfg.get("solver", "init", "adjoint-through-prior"),
    )


@dataclass
class Setup:
    oracle: Signal
    padding: tuple
    problem: Problem
    prior: object
    seed: int


def build_setup(cfg, repetition=0):
    """Oracle image, measurement problem and prior for one repetition.

    Repetition r uses seed ``experiment.seed + r`` for the operator and noise.
    """
    rep_seed = cfg.seed + repetition
    if cfg.pipeline == "patch-cs":
        oracle, img, padding, op = _build_patch_problem(cfg, rep_seed)
    else:
        oracle, img, padding, op = _build_mri_problem(cfg, rep_seed)
    x_true = img.reshape(-1)
    sigma = cfg.get("noise", "sigma", 0.0)
    noise = None
    if sigma > 0:
        noise = sigma * np.random.default_rng([rep_seed, 1]).standard_normal(op.out_dim)
    problem = Problem.from_truth(op, x_true, noise)
    return Setup(oracle, padding, problem, build_prior(cfg, img.shape), rep_seed)


def setup_certificate(cfg, setup, gamma=None):
    """Certificate for a setup using pairs built around the oracle image."""
    x_true = setup.problem.x_true
    pairs = cfg.get("certify", "pairs", 2000)
    sampler = PairSampler("awgn-pairs", [x_true], count=pairs, seed=setup.seed)
    mu_sampler = PairSampler("image-space-pairs", [x_true], count=cfg.get("certify", "mu_pairs", pairs),
                             seed=setup.seed)
    cert = build_certificate(setup.problem.op, setup.prior, sampler, gamma=gamma,
                             mu_sampler=mu_sampler, err_norm=setup.problem.noise_norm or 0.0)
    return cert, sampler


def run_single(cfg, repetition=0):
    """Build and solve one repetition; returns a RunResult."""
    setup = build_setup(cfg, repetition)
    oracle, padding, problem, prior = setup.oracle, setup.padding, setup.problem, setup.prior
    op = problem.op
    lam = spectral_norm(op).value
    solver_cfg = _solver_config(cfg)
    algorithm = cfg.get("solver", "algorithm", "pnp")
    if algorithm == "red" and solver_cfg.gamma is None:
        solver_cfg = replace(solver_cfg, gamma=default_gamma("red", lam, solver_cfg.tau, prior.alpha))
    cert, hists = None, {}
    if cfg.get("certify", "enabled", False):
        cert, sampler = setup_certificate(cfg, setup, solver_cfg.gamma)
        solver_cfg = replace(solver_cfg, gamma=cert.gamma)
        hists["residual_lipschitz"] = estimate_lipschitz(prior.residual, sampler).histogram.to_dict()
    elif solver_cfg.gamma is None:
        solver_cfg = replace(solver_cfg, gamma=default_gamma(algorithm, lam, solver_cfg.tau, prior.alpha))
    start = time.perf_counter()
    run = pnp_pgm if algorithm == "pnp" else sd_red
    trace = run(problem, prior, solver_cfg)
    wall = time.perf_counter() - start
    return RunResult(cfg.experiment_id, repetition, trace, problem, prior, oracle, oracle.shape,
                     wall, cert, hists, padding)


def run_patch_cs(cfg, out_dir=None):
    if cfg.pipeline != "patch-cs":
        cfg = cfg.with_values("experiment", pipeline="patch-cs")
    return run_experiment(cfg, out_dir)


def run_cs_mri(cfg, out_dir=None):
    if cfg.pipeline != "cs-mri":
        cfg = cfg.with_values("experiment", pipeline="cs-mri")
    return run_experiment(cfg, out_dir)


def grid_points(cfg):
    """Expand the [grid] section into per-point configs (one per ratio or line count)."""
    ratios = cfg.get("grid", "ratios")
    lines = cfg.get("grid", "num_lines")
    if ratios and lines:
        raise ConfigError("grid takes ratios or num_lines, not both")
    if ratios:
        return [cfg.with_values("problem", ratio=r).with_values(
            "experiment", id=f"{cfg.experiment_id}-r{r:g}") for r in ratios]
    if lines:
        return [cfg.with_values("problem", num_lines=int(v)).with_values(
            "experiment", id=f"{cfg.experiment_id}-l{int(v)}") for v in lines]
    return [cfg]


def format_metrics(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow(_cell(row[c]) for c in METRICS_COLUMNS)
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_experiment(cfg, out_dir=None, workers=None):
    """Run every grid point and repetition; write reports through one writer.

    Returns the list of RunResult in (grid point, repetition) order.
    """
    points = grid_points(cfg)
    jobs = [(p, r) for p in points for r in range(p.repetitions)]
    workers = workers or cfg.get("grid", "workers", 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: run_single(*job), jobs))
    else:
        results = [run_single(p, r) for p, r in jobs]
    if out_dir is not None:
        write_reports(results, out_dir, timing=cfg.get("output", "timing", False))
    return results


def write_reports(results, out_dir, timing=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.metrics_row(timing) for r in results]
    (out / "metrics.csv").write_text(format_metrics(rows))
    for r in results:
        stem = f"{r.experiment_id}_rep{r.repetition}"
        r.trace.to_csv(out / f"{stem}_trace.csv")
        if r.certificate is not None:
            (out / f"{stem}_certificate.json").write_text(r.certificate.to_json())
        if r.histograms:
            (out / f"{stem}_histograms.json").write_text(json.dumps(r.histograms))
        if any(r.padding):
            (out / f"{stem}_padding.json").write_text(json.dumps({"pad_rows": r.padding[0],
                                                                  "pad_cols": r.padding[1],
                                                                  "mode": "reflect"}))
    return rows
