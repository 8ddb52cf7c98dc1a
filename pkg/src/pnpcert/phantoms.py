"""Deterministic synthetic test images with values in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.fft import idctn

from .linops import Signal
from .priors import _keep_mask, lowest_frequencies

PHANTOMS = ("dct-subspace", "piecewise-rect", "shepp-like")

# (intensity, semi-axis a, semi-axis b, center x, center y, angle in degrees)
_SHEPP_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


class PhantomError(ValueError):
    pass


def _dct_subspace(shape, seed, keep=None, k=None):
    if keep is None:
        keep = lowest_frequencies(shape, k if k is not None else max(1, int(np.prod(shape)) // 16))
    mask = _keep_mask(shape, keep)
    if not mask.reshape(-1)[0]:
        raise PhantomError("the kept set must include the DC coefficient to fit [0, 1]")
    rng = np.random.default_rng(seed)
    coeff = np.zeros(shape)
    coeff[mask] = rng.standard_normal(int(mask.sum()))
    img = idctn(coeff, norm="ortho")
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.full(shape, 0.5)
    # An affine map keeps the image in the span because DC is kept.
    return (img - lo) / (hi - lo)


def _piecewise_rect(shape, seed, count=6):
    h, w = shape
    rng = np.random.default_rng(seed)
    img = np.zeros(shape)
    for _ in range(count):
        r0, r1 = np.sort(rng.integers(0, h + 1, size=2))
        c0, c1 = np.sort(rng.integers(0, w + 1, size=2))
        if r1 - r0 < 2:
            r1 = min(h, r0 + max(2, h // 8))
        if c1 - c0 < 2:
            c1 = min(w, c0 + max(2, w // 8))
        img[r0:r1, c0:c1] = rng.uniform(0.2, 1.0)
    return img


def _shepp_like(shape, seed):
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(1, -1, h), np.linspace(-1, 1, w), indexing="ij")
    img = np.zeros(shape)
    for value, a, b, x0, y0, deg in _SHEPP_ELLIPSES:
        t = np.deg2rad(deg)
        u = (xx - x0) * np.cos(t) + (yy - y0) * np.sin(t)
        v = -(xx - x0) * np.sin(t) + (yy - y0) * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return np.clip(img, 0.0, 1.0)


def make_phantom(name, shape=(64, 64), seed=0, **params):
    """Build a synthetic oracle image.

    Args:
        name: ``dct-subspace`` (random image in the span of kept DCT atoms;
            params ``keep`` or ``k``), ``piecewise-rect`` (overlapping constant
            rectangles; param ``count``) or ``shepp-like`` (head phantom made
            of ellipses; the seed is unused).
        shape: (height, width).
        seed: integer seed.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2 or min(shape) < 2:
        raise PhantomError(f"bad phantom shape {shape}")
    if name == "dct-subspace":
        img = _dct_subspace(shape, seed, **params)
    elif name == "piecewise-rect":
        img = _piecewise_rect(shape, seed, **params)
    elif name == "shepp-like":
        if params:
            raise PhantomError(f"shepp-like takes no params, got {sorted(params)}")
        img = _shepp_like(shape, seed)
    else:
        raise PhantomError(f"unknown phantom {name!r}; choose from {PHANTOMS}")
    return Signal.from_image(img)
