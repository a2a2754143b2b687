"""Fast exact-case checks run by ``equimap selftest``."""

from __future__ import annotations

import numpy as np

from .equilearn import INF, EquivariantMap, neighborhood
from .featnet import Conv2D, Dense, grad_check
from .fields import Geometry
from .hog import HogConfig, analytic_permutation, extract_hog_batch
from .imaging import GeometricTransform, parse_transform, warp
from .netsurgery import StitchingLayer, TransformationLayer, build_permutation_table, translayer_apply, \
    translayer_to_map

__all__ = ["run_selftest", "exhaustive_neighborhood"]


def exhaustive_neighborhood(p_out, p_in, g, m, site, in_dims):
    """Reference neighborhood: sort every input site by (distance, v, u)."""
    H, W = in_dims
    pt = p_in.to_grid(g.inverse().apply(p_out.to_image(np.asarray(site, float))))
    cand = sorted(((u - pt[0]) ** 2 + (v - pt[1]) ** 2, v, u) for v in range(H) for u in range(W))
    count = H * W if m == INF else min(int(m) ** 2, H * W)
    return np.array([(u, v) for _, v, u in cand[:count]])


def _hog_permutations(n, rng):
    cfg = HogConfig()
    X = rng.uniform(size=(n, 64, 64))
    F = extract_hog_batch(X, cfg)
    worst = 0.0
    for name in ("hflip", "vflip", "rot180"):
        g = parse_transform(name, (64, 64))
        M = analytic_permutation(F.shape[1:3], g, cfg)
        Fg = extract_hog_batch(np.stack([warp(x, g) for x in X]), cfg)
        worst = max(worst, float(np.abs(Fg - M.apply(F)).max()))
    return worst <= 1e-10, f"max |phi(gx) - P phi(x)| = {worst:.2e}"


def _neighborhoods(n, rng):
    geo_in = Geometry(8.0, (3.5, 3.5))
    bad = 0
    for _ in range(n):
        g = GeometricTransform.rotation(float(rng.uniform(0, 360)), (31.5, 31.5))
        m = int(rng.choice([1, 3, 5]))
        site = tuple(int(v) for v in rng.integers(0, 8, 2))
        a = neighborhood(geo_in, geo_in, g, m, site, (8, 8))
        b = exhaustive_neighborhood(geo_in, geo_in, g, m, site, (8, 8))
        bad += not np.array_equal(a, b)
    return bad == 0, f"{bad} mismatches in {n} cases"


def _adjoint(n, rng):
    shape = (4, 5, 3)
    d = int(np.prod(shape))
    worst = 0.0
    for _ in range(n):
        rows = rng.integers(0, d, 40)
        cols = rng.integers(0, d, 40)
        M = EquivariantMap.from_triplets(shape, shape, rows, cols, rng.standard_normal(40), np.zeros(d))
        w, f = rng.standard_normal(d), rng.standard_normal(shape)
        lhs = float(np.dot(M.transpose_apply(w).ravel(), f.ravel()))
        rhs = float(np.dot(w, M.apply(f).ravel()))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
    return worst <= 1e-9, f"max adjoint gap {worst:.2e}"


def _translayer_equivalence(rng):
    worst = 0.0
    geo = Geometry(2.0, (0.0, 0.0))
    for name in ("hflip", "rot90", "rot:30"):
        g = parse_transform(name, (32, 32))
        for mode in ("round", "bilinear"):
            t = build_permutation_table(geo, g, mode, (8, 8))
            L = TransformationLayer(t, 3, 3, rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3), g, geo)
            f = rng.standard_normal((8, 8, 3))
            worst = max(worst, float(np.abs(translayer_apply(L, f) - translayer_to_map(L).apply(f)).max()))
    return worst <= 1e-10, f"max |layer - map| = {worst:.2e}"


def _gradients(rng):
    geo = Geometry(2.0, (0.0, 0.0))
    g = parse_transform("rot:30", (16, 16))
    layers = {
        "conv": (Conv2D(3, 4, 3, 1, 1, rng=0), (2, 6, 6, 3)),
        "fc": (Dense(12, 5, rng=0), (3, 12)),
        "translayer-round": (TransformationLayer(build_permutation_table(geo, g, "round", (8, 8)), 3, 3,
                                                 rng.standard_normal((3, 3, 3, 3))), (2, 8, 8, 3)),
        "translayer-bilinear": (TransformationLayer(build_permutation_table(geo, g, "bilinear", (8, 8)), 3, 3,
                                                    rng.standard_normal((3, 3, 3, 3))), (2, 8, 8, 3)),
        "stitch": (StitchingLayer(3, 4, 1, seed=0, init="random"), (2, 6, 6, 3)),
    }
    errs = {k: grad_check(layer, shape, seed=1) for k, (layer, shape) in layers.items()}
    worst = max(errs.values())
    return worst < 1e-4, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


def run_selftest(n=10, seed=0):
    """Run every check; returns a list of ``(name, passed, detail)``."""
    rng = np.random.default_rng(seed)
    checks = [
        ("hog-exact-permutations", lambda: _hog_permutations(n, rng)),
        ("neighborhood-oracle", lambda: _neighborhoods(10 * n, rng)),
        ("adjoint-identity", lambda: _adjoint(10 * n, rng)),
        ("translayer-map-equivalence", lambda: _translayer_equivalence(rng)),
        ("gradient-checks", lambda: _gradients(rng)),
    ]
    out = []
    for name, fn in checks:
        ok, detail = fn()
        out.append((name, bool(ok), detail))
    return out
