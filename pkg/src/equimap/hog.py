"""31-channel HOG features with exact flip / half-turn permutations.

The layout follows the UoCTTI variant: ``2K`` contrast-sensitive orientation
bins, ``K`` contrast-insensitive bins and four texture (normalization
energy) channels, ``D = 3K + 4``.  Orientation and spatial binning are both
bilinear, which keeps the descriptor a continuous function of the gradient
angle; that continuity is what makes the flip permutations exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images
from .fields import FeatureField, Geometry
from .imaging import GeometricTransform

__all__ = [
    "HogConfig",
    "HOGTransformer",
    "extract_hog",
    "extract_hog_batch",
    "hog_geometry",
    "analytic_permutation",
    "channel_permutation",
    "field_distance",
    "UnsupportedTransformError",
]

CLAMP = 0.2
EPS = 1e-10
TEXTURE_GAIN = 0.2357


class UnsupportedTransformError(ValueError):
    """Raised when no exact feature permutation exists for a transform."""


@dataclass(frozen=True)
class HogConfig:
    cell_size: int = 8
    num_orientations: int = 9

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError(f"cell_size must be >= 2, got {self.cell_size}")
        if self.num_orientations < 2:
            raise ValueError(f"num_orientations must be >= 2, got {self.num_orientations}")

    @property
    def dimension(self):
        return 3 * self.num_orientations + 4


def hog_geometry(cfg):
    # cell c covers pixels [c*s, (c+1)*s); its center in pixel-center coordinates
    s = cfg.cell_size
    return Geometry(float(s), ((s - 1) / 2.0, (s - 1) / 2.0))


def _pool_matrix(n_pixels, n_cells, s):
    """Bilinear spatial binning weights, shape ``(n_cells, n_pixels)``."""
    x = np.arange(n_pixels)
    f = (x + 0.5) / s - 0.5
    c0 = np.floor(f).astype(np.int64)
    a = f - c0
    P = np.zeros((n_cells + 2, n_pixels))
    P[c0 + 1, x] += 1.0 - a
    P[c0 + 2, x] += a
    return P[1:-1]


def _gradients(images):
    """Central differences with replicated borders; color keeps the strongest channel."""
    pad = [(0, 0), (1, 1), (1, 1)] + ([(0, 0)] if images.ndim == 4 else [])
    p = np.pad(images, pad, mode="edge")
    dx = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) / 2.0
    dy = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) / 2.0
    if images.ndim == 4:
        mag2 = dx * dx + dy * dy
        best = np.argmax(mag2, axis=3)[..., None]
        dx = np.take_along_axis(dx, best, 3)[..., 0]
        dy = np.take_along_axis(dy, best, 3)[..., 0]
    return dx, dy


def extract_hog_batch(images, cfg=HogConfig(), chunk_pixels=1 << 21):
    """HOG of a batch ``(N, H, W[, 3])``; returns ``(N, Hc, Wc, 3K+4)``.

    Image sizes that are not multiples of the cell size are cropped to the
    largest multiple, keeping the top-left corner.  Large batches are
    processed in chunks of about ``chunk_pixels`` pixels.
    """
    images = check_images(images)
    s = cfg.cell_size
    N, h, w = images.shape[:3]
    Hc, Wc = h // s, w // s
    if Hc < 1 or Wc < 1:
        raise ValueError(f"image {h}x{w} is smaller than one {s}x{s} cell")
    step = max(1, chunk_pixels // (h * w))
    if N > step:
        return np.concatenate([_hog_chunk(images[i:i + step], cfg) for i in range(0, N, step)])
    return _hog_chunk(images, cfg)


def _hog_chunk(images, cfg):
    s, K = cfg.cell_size, cfg.num_orientations
    N, h, w = images.shape[:3]
    Hc, Wc = h // s, w // s
    images = images[:, : Hc * s, : Wc * s]
    h, w = Hc * s, Wc * s

    dx, dy = _gradients(images)
    mag = np.sqrt(dx * dx + dy * dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
    t = theta / (math.pi / K)
    o0 = np.floor(t)
    a = t - o0
    o0 = o0.astype(np.int64) % (2 * K)
    o1 = (o0 + 1) % (2 * K)

    energy = np.zeros((N * h * w, 2 * K))
    rows = np.arange(N * h * w)
    energy[rows, o0.ravel()] = ((1.0 - a) * mag).ravel()
    energy[rows, o1.ravel()] += (a * mag).ravel()
    energy = energy.reshape(N, h, w, 2 * K)

    Py = _pool_matrix(h, Hc, s)
    Px = _pool_matrix(w, Wc, s)
    hist = np.einsum("cy,nyxk->ncxk", Py, energy, optimize=True)
    hist = np.einsum("dx,ncxk->ncdk", Px, hist, optimize=True)

    unsigned = hist[..., :K] + hist[..., K:]
    norm = np.sum(unsigned * unsigned, axis=-1)
    norm = np.pad(norm, [(0, 0), (1, 1), (1, 1)], mode="edge")
    feats = np.empty((N, Hc, Wc, 3 * K + 4))
    sens = np.zeros((N, Hc, Wc, 2 * K))
    insens = np.zeros((N, Hc, Wc, K))
    for a_ in (0, 1):
        for b_ in (0, 1):
            # block rows v-1+a_ .. v+a_, cols u-1+b_ .. u+b_ (padded coordinates +1)
            blk = (norm[:, a_:a_ + Hc, b_:b_ + Wc] + norm[:, a_ + 1:a_ + 1 + Hc, b_:b_ + Wc]
                   + norm[:, a_:a_ + Hc, b_ + 1:b_ + 1 + Wc] + norm[:, a_ + 1:a_ + 1 + Hc, b_ + 1:b_ + 1 + Wc])
            n = 1.0 / np.sqrt(blk + EPS)
            hs = np.minimum(hist * n[..., None], CLAMP)
            sens += hs
            insens += np.minimum(unsigned * n[..., None], CLAMP)
            feats[..., 3 * K + 2 * a_ + b_] = TEXTURE_GAIN * hs.sum(axis=-1)
    feats[..., : 2 * K] = 0.5 * sens
    feats[..., 2 * K: 3 * K] = 0.5 * insens
    return feats


def extract_hog(x, cfg=HogConfig()):
    """HOG :class:`FeatureField` of a single image."""
    x = np.asarray(x, dtype=np.float64)
    return FeatureField(extract_hog_batch(x[None], cfg)[0], hog_geometry(cfg))


class HOGTransformer(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer mapping image batches to flattened HOG vectors.

    Parameters
    ----------
    cell_size : int, default=8
    num_orientations : int, default=9
    flatten : bool, default=True
        Return ``(N, Hc*Wc*D)`` rows instead of ``(N, Hc, Wc, D)`` fields.
    """

    def __init__(self, cell_size=8, num_orientations=9, flatten=True):
        self.cell_size = cell_size
        self.num_orientations = num_orientations
        self.flatten = flatten

    def fit(self, X, y=None):
        X = check_images(X)
        self.config_ = HogConfig(self.cell_size, self.num_orientations)
        self.field_shape_ = extract_hog_batch(X[:1], self.config_).shape[1:]
        self.geometry_ = hog_geometry(self.config_)
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or HogConfig(self.cell_size, self.num_orientations)
        F = extract_hog_batch(X, cfg)
        return F.reshape(len(F), -1) if self.flatten else F

    def __call__(self, x):
        cfg = HogConfig(self.cell_size, self.num_orientations)
        return extract_hog(x, cfg)

    def features(self, images):
        """``(N, Hc, Wc, D)`` fields regardless of ``flatten``."""
        return extract_hog_batch(images, HogConfig(self.cell_size, self.num_orientations))

    @property
    def geometry(self):
        return hog_geometry(HogConfig(self.cell_size, self.num_orientations))


# ---------------------------------------------------------------------------
# exact permutations


def channel_permutation(kind, cfg=HogConfig()):
    """Channel map ``t -> pi(t)`` with ``phi(gx)[g(s), pi(t)] = phi(x)[s, t]``."""
    K = cfg.num_orientations
    o = np.arange(2 * K)
    u = np.arange(K)
    tex = np.arange(4)
    a, b = tex // 2, tex % 2
    if kind == "hflip":
        sens, insens, texture = (K - o) % (2 * K), (-u) % K, 2 * a + (1 - b)
    elif kind == "vflip":
        sens, insens, texture = (-o) % (2 * K), (-u) % K, 2 * (1 - a) + b
    elif kind == "rot180":
        sens, insens, texture = (o + K) % (2 * K), u, 2 * (1 - a) + (1 - b)
    elif kind == "id":
        sens, insens, texture = o, u, tex
    else:
        raise UnsupportedTransformError(
            f"no exact HOG permutation for {kind!r} with K={K}; supported: hflip, vflip, rot180")
    return np.concatenate([sens, 2 * K + insens, 3 * K + texture])


def _flip_kind(g, shape):
    from .imaging import parse_transform

    if isinstance(g, str):
        kind = g.strip().lower().replace("rot:180", "rot180")
        if kind in ("hflip", "vflip", "rot180", "id"):
            return kind, parse_transform(kind, shape)
        raise UnsupportedTransformError(f"no exact HOG permutation for {g!r}")
    L = np.round(g.linear, 12)
    table = {((-1, 0), (0, 1)): "hflip", ((1, 0), (0, -1)): "vflip",
             ((-1, 0), (0, -1)): "rot180", ((1, 0), (0, 1)): "id"}
    key = tuple(tuple(int(v) for v in row) for row in L) if np.all(L == np.round(L)) else None
    if key not in table:
        raise UnsupportedTransformError(f"no exact HOG permutation for {g!r}")
    return table[key], g


def analytic_permutation(dims, g, cfg=HogConfig()):
    """Exact :class:`~equimap.equilearn.EquivariantMap` for a flip or half turn.

    ``dims`` is the cell grid ``(H, W)``; ``g`` is ``"hflip"``, ``"vflip"``,
    ``"rot180"`` (about the image center) or an equivalent
    :class:`GeometricTransform` for an image of ``H*cell x W*cell`` pixels.
    """
    from .equilearn import EquivariantMap

    H, W = dims[:2]
    D = cfg.dimension
    s = cfg.cell_size
    kind, gt = _flip_kind(g, (H * s, W * s))
    perm = channel_permutation(kind, cfg)
    geo = hog_geometry(cfg)
    vv, uu = np.mgrid[0:H, 0:W]
    src = geo.to_grid(gt.inverse().apply(geo.to_image(np.stack([uu, vv], -1))))
    src_i = np.rint(src).astype(np.int64)
    if not np.allclose(src, src_i, atol=1e-9) or src_i.min() < 0 or np.any(src_i[..., 0] >= W) \
            or np.any(src_i[..., 1] >= H):
        raise UnsupportedTransformError(f"{kind} does not map the {H}x{W} cell lattice onto itself")
    inv_perm = np.argsort(perm)
    out_rows = np.arange(H * W * D)
    site_in = src_i[..., 1] * W + src_i[..., 0]
    cols = (site_in[..., None] * D + inv_perm[None, None, :]).reshape(-1)
    return EquivariantMap.from_triplets(
        shape=(H, W, D), in_shape=(H, W, D), rows=out_rows, cols=cols,
        coefs=np.ones(len(out_rows)), bias=np.zeros(len(out_rows)),
        g=gt, method="analytic", k=1, m=1, lam=0.0)


# ---------------------------------------------------------------------------
# distances


def _as_array(f):
    return f.data if isinstance(f, FeatureField) else np.asarray(f, dtype=np.float64)


def cell_distances(f1, f2, metric="hellinger"):
    """Per-cell distances over the trailing channel axis."""
    a, b = _as_array(f1), _as_array(f2)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "l2":
        return np.sqrt(np.sum((a - b) ** 2, axis=-1))
    if metric in ("hellinger", "chi2"):
        if a.size and (a.min() < 0 or b.min() < 0):
            raise ValueError(f"{metric} distance requires nonnegative features")
        if metric == "hellinger":
            return np.sqrt(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2, axis=-1))
        return np.sum((a - b) ** 2 / (a + b + EPS), axis=-1)
    raise ValueError(f"unknown metric {metric!r}")


def field_distance(f1, f2, metric="hellinger"):
    """Mean over cells of the per-cell ``l2``, ``hellinger`` or ``chi2`` distance."""
    return float(np.mean(cell_distances(f1, f2, metric)))
