"""Transformation and stitching layers spliced into a trained network.

A transformation layer is the convolutional form of an equivariant map: a
fixed permutation of feature sites by ``g`` followed by ``D`` trainable
``m x m x D`` filters.  A stitching layer is a bank of filters that feeds
the lower part of one network into the upper part of another.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .equilearn import INF, EquivariantMap, back_project, neighborhood
from .featnet import Conv2D, NetworkSplit, TrainConfig, softmax_logloss
from .fields import FeatureField, Geometry
from .imaging import GeometricTransform, warp

__all__ = [
    "PermutationTable",
    "TransformationLayer",
    "StitchingLayer",
    "SupportViolationError",
    "build_permutation_table",
    "translayer_apply",
    "translayer_to_map",
    "map_to_translayer",
    "train_inserted_layer",
    "train_transformation_layer",
    "learn_stitch",
    "evaluate_franken",
    "compensated_error",
    "fit_translayer_regression",
    "fit_stitch_regression",
    "save_layer",
    "load_layer",
]

log = logging.getLogger(__name__)


class SupportViolationError(ValueError):
    """A map coefficient falls outside the structured neighborhood of its row."""


@dataclass
class PermutationTable:
    """``(out_site, in_site, weight)`` triplets over an ``H x W`` grid.

    Sites are flat indices ``v * W + u``.  ``dead`` marks output sites
    whose source falls outside the grid; they produce zeros.
    """

    dims: tuple
    out_site: np.ndarray
    in_site: np.ndarray
    weight: np.ndarray
    dead: np.ndarray
    mode: str = "round"

    def matrix(self):
        n = self.dims[0] * self.dims[1]
        return sp.csr_matrix((self.weight, (self.out_site, self.in_site)), shape=(n, n))

    def lookup(self):
        """``{(u, v): [((u', v'), w), ...]}`` for the live output sites."""
        W = self.dims[1]
        out = {}
        for o, i, w in zip(self.out_site, self.in_site, self.weight):
            out.setdefault((int(o % W), int(o // W)), []).append(((int(i % W), int(i // W)), float(w)))
        return out


def build_permutation_table(geometry, g, mode="round", dims=None):
    """Source sites for every output site at ``p^-1 o g^-1 o p (u, v)``.

    ``mode="round"`` takes the nearest lattice site (halves round up);
    ``mode="bilinear"`` spreads over the surrounding 2x2 sites, dropping
    out-of-grid corners and renormalizing the remaining weights to sum to 1.
    """
    if dims is None:
        raise ValueError("grid dims (H, W) are required")
    if not g.is_invertible():
        raise ValueError("transform is not invertible")
    H, W = dims
    vv, uu = np.mgrid[0:H, 0:W]
    pts = back_project(geometry, geometry, g, np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float))
    # snap round-off so that lattice-exact transforms stay exact
    snapped = np.rint(pts)
    pts = np.where(np.abs(pts - snapped) < 1e-9, snapped, pts)
    outs, ins, wts = [], [], []
    dead = np.zeros(H * W, dtype=bool)
    if mode == "round":
        src = np.floor(pts + 0.5).astype(np.int64)
        ok = (src[:, 0] >= 0) & (src[:, 0] < W) & (src[:, 1] >= 0) & (src[:, 1] < H)
        idx = np.flatnonzero(ok)
        outs, ins, wts = idx, src[ok, 1] * W + src[ok, 0], np.ones(len(idx))
        dead = ~ok
    elif mode == "bilinear":
        base = np.floor(pts).astype(np.int64)
        frac = pts - base
        for o in range(H * W):
            cand = []
            for dv in (0, 1):
                for du in (0, 1):
                    u, v = base[o, 0] + du, base[o, 1] + dv
                    w = (frac[o, 0] if du else 1 - frac[o, 0]) * (frac[o, 1] if dv else 1 - frac[o, 1])
                    if w > 0 and 0 <= u < W and 0 <= v < H:
                        cand.append((v * W + u, w))
            total = sum(w for _, w in cand)
            if not cand or total <= 0:
                dead[o] = True
                continue
            for i, w in cand:
                outs.append(o)
                ins.append(i)
                wts.append(w / total)
        outs, ins, wts = np.array(outs, np.int64), np.array(ins, np.int64), np.array(wts)
    else:
        raise ValueError(f"mode must be 'round' or 'bilinear', got {mode!r}")
    return PermutationTable((H, W), np.asarray(outs), np.asarray(ins), np.asarray(wts), dead.reshape(H, W), mode)


class TransformationLayer:
    """Site permutation followed by ``D`` filters of size ``m x m x D`` and a bias.

    Behaves as a network layer on ``(N, H, W, D)`` batches: ``forward``,
    ``backward`` and ``params``/``grads`` dictionaries with keys ``W`` (shape
    ``(m, m, D, D)``, indexed ``[dy, dx, in, out]``) and ``b``.
    """

    kind = "translayer"

    def __init__(self, table, D, m=3, filters=None, bias=None, g=None, geometry=None):
        if m % 2 != 1:
            raise ValueError("filter size m must be odd")
        self.table = table
        self.D = D
        self.m = m
        self.g = g
        self.geometry = geometry
        self._S = table.matrix()
        self._live = (~table.dead).astype(np.float64)[None, :, :, None]
        self._conv = Conv2D(D, D, m, stride=1, pad=(m - 1) // 2, rng=0)
        if filters is None:
            filters = np.zeros((m, m, D, D))
            filters[(m - 1) // 2, (m - 1) // 2] = np.eye(D)
        self._conv.params["W"] = np.array(filters, dtype=np.float64)
        self._conv.params["b"] = np.zeros(D) if bias is None else np.array(bias, dtype=np.float64)
        self.params = self._conv.params
        self.grads = {}

    @property
    def mode(self):
        return self.table.mode

    @property
    def filters(self):
        return self.params["W"]

    @property
    def bias(self):
        return self.params["b"]

    def permute(self, f):
        N, H, W, D = f.shape
        if (H, W) != tuple(self.table.dims) or D != self.D:
            raise ValueError(f"layer expects (*, {self.table.dims[0]}, {self.table.dims[1]}, {self.D}), got {f.shape}")
        flat = f.transpose(1, 2, 0, 3).reshape(H * W, N * D)
        return (self._S @ flat).reshape(H, W, N, D).transpose(2, 0, 1, 3)

    def forward(self, f):
        f = np.asarray(f, dtype=np.float64)
        self._in_shape = f.shape
        return self._conv.forward(self.permute(f)) * self._live

    def backward(self, dout):
        dp = self._conv.backward(dout * self._live)
        self.grads = self._conv.grads
        N, H, W, D = dp.shape
        flat = dp.transpose(1, 2, 0, 3).reshape(H * W, N * D)
        return (self._S.T @ flat).reshape(H, W, N, D).transpose(2, 0, 1, 3)

    def copy(self):
        return TransformationLayer(self.table, self.D, self.m, self.filters.copy(), self.bias.copy(),
                                   self.g, self.geometry)


def translayer_apply(layer, f):
    """Apply a transformation layer to a :class:`FeatureField` or array (batch)."""
    if isinstance(f, FeatureField):
        return FeatureField(layer.forward(f.data[None])[0], f.geometry)
    a = np.asarray(f, dtype=np.float64)
    return layer.forward(a[None])[0] if a.ndim == 3 else layer.forward(a)


def translayer_to_map(layer):
    """Expand a transformation layer into the equivalent sparse :class:`EquivariantMap`."""
    H, W = layer.table.dims
    D, m = layer.D, layer.m
    r = (m - 1) // 2
    lookup = layer.table.lookup()
    rows, cols, vals = [], [], []
    bias = np.zeros(H * W * D)
    Wf = layer.filters
    for v in range(H):
        for u in range(W):
            if layer.table.dead[v, u]:
                continue
            base = (v * W + u) * D
            bias[base:base + D] = layer.bias
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    uu, vv = u + dx, v + dy
                    if not (0 <= uu < W and 0 <= vv < H) or (uu, vv) not in lookup:
                        continue
                    for (su, sv), w in lookup[(uu, vv)]:
                        block = w * Wf[dy + r, dx + r]  # (in, out)
                        src = (sv * W + su) * D
                        ti, to = np.nonzero(block)
                        rows.append(base + to)
                        cols.append(src + ti)
                        vals.append(block[ti, to])
    cat = (lambda a: np.concatenate(a) if a else np.zeros(0, np.int64))
    return EquivariantMap.from_triplets((H, W, D), (H, W, D), cat(rows), cat(cols), cat(vals).astype(float), bias,
                                        g=layer.g, method="translayer", k=INF, m=m, valid=~layer.table.dead)


def map_to_translayer(M, g=None, m=3, geometry=None, check_support=True):
    """Tie a sparse map into a transformation layer (round mode).

    Each coefficient linking output site ``o`` to input site ``s`` is placed
    at the filter tap ``o' - o``, where ``o'`` is the output site that the
    permutation fills from ``s``; taps are then averaged over all output
    sites where they are defined.  Returns ``(layer, residual)``;
    ``residual`` is the largest deviation of any row coefficient from the
    tied filter (coefficients that do not fit the ``m x m`` window count in
    full).
    """
    g = g if g is not None else M.g
    geometry = geometry if geometry is not None else Geometry()
    H, W, D = M.shape
    if M.in_shape != M.shape:
        raise ValueError("map must be square over one grid")
    table = build_permutation_table(geometry, g, "round", (H, W))
    live = ~table.dead
    # input site -> output sites the permutation fills from it
    filled = {}
    for o, i in zip(table.out_site, table.in_site):
        filled.setdefault(int(i), []).append(int(o))
    r = (m - 1) // 2
    acc = np.zeros((m, m, D, D))
    cnt = np.zeros((m, m, 1, D))
    bias_acc = np.zeros(D)
    bias_cnt = 0
    rows = []
    for v in range(H):
        for u in range(W):
            o = v * W + u
            if not M.valid[v, u] or not live[v, u]:
                continue
            if check_support and M.m != INF:
                allowed = {tuple(s) for s in neighborhood(geometry, geometry, g, M.m, (u, v), (H, W))}
            bias_acc += M.bias[o * D:(o + 1) * D]
            bias_cnt += 1
            taps = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
                    if 0 <= u + dx < W and 0 <= v + dy < H and live[v + dy, u + dx]]
            for dx, dy in taps:
                cnt[dy + r, dx + r] += 1
            for t in range(D):
                cols, coefs = M.row(o * D + t)
                sites, ti = cols // D, cols % D
                if check_support and M.m != INF:
                    bad = [(int(s % W), int(s // W)) for s in sites if (int(s % W), int(s // W)) not in allowed]
                    if bad:
                        raise SupportViolationError(f"row {(u, v, t)} uses sites {bad[:3]} outside its neighborhood")
                dx = np.full(len(cols), m, np.int64)
                dy = np.full(len(cols), m, np.int64)
                for j, s in enumerate(sites):
                    for o2 in filled.get(int(s), ()):
                        ex, ey = o2 % W - u, o2 // W - v
                        if abs(ex) <= r and abs(ey) <= r:
                            dx[j], dy[j] = ex, ey
                            break
                inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
                np.add.at(acc, (dy[inside] + r, dx[inside] + r, ti[inside], t), coefs[inside])
                rows.append((t, taps, dx, dy, ti, coefs, inside))
    filters = acc / np.maximum(cnt, 1)
    bias = bias_acc / max(bias_cnt, 1)
    residual = 0.0
    for t, taps, dx, dy, ti, coefs, inside in rows:
        tied = np.zeros(len(coefs))
        tied[inside] = filters[dy[inside] + r, dx[inside] + r, ti[inside], t]
        if len(coefs):
            residual = max(residual, float(np.abs(coefs - tied).max()))
        # tied-filter taps that this row leaves out
        present = np.zeros((m, m, D), bool)
        present[dy[inside] + r, dx[inside] + r, ti[inside]] = True
        for ex, ey in taps:
            miss = np.abs(filters[ey + r, ex + r, :, t][~present[ey + r, ex + r]])
            if miss.size:
                residual = max(residual, float(miss.max()))
    layer = TransformationLayer(table, D, m, filters, bias, g=g, geometry=geometry)
    return layer, residual


class StitchingLayer:
    """Bank of ``D_out`` filters of size ``s x s x D_in`` with optional nearest resampling.

    ``resample`` is ``None`` or an integer factor: positive values upsample
    by repetition, negative values downsample by striding.
    """

    kind = "stitch"

    def __init__(self, D_in, D_out, s=1, resample=None, init="identity", seed=0):
        if s % 2 != 1:
            raise ValueError("stitch filter size must be odd")
        self.D_in, self.D_out, self.s, self.resample = D_in, D_out, s, resample
        rng = np.random.default_rng(seed)
        self._conv = Conv2D(D_in, D_out, s, stride=1, pad=(s - 1) // 2, rng=rng)
        if init == "identity" and D_in == D_out:
            W = np.zeros((s, s, D_in, D_out))
            W[(s - 1) // 2, (s - 1) // 2] = np.eye(D_in)
        else:
            W = rng.standard_normal((s, s, D_in, D_out)) / math.sqrt(s * s * D_in)
        self._conv.params["W"] = W
        self.params = self._conv.params
        self.grads = {}

    def _resample(self, f):
        r = self.resample
        if not r or r in (1, -1):
            return f
        if r > 1:
            return np.repeat(np.repeat(f, r, axis=1), r, axis=2)
        return f[:, ::-r, ::-r]

    def forward(self, f):
        f = np.asarray(f, dtype=np.float64)
        self._in_shape = f.shape
        return self._conv.forward(self._resample(f))

    def backward(self, dout):
        d = self._conv.backward(dout)
        self.grads = self._conv.grads
        r = self.resample
        if not r or r in (1, -1):
            return d
        if r > 1:
            N, H, W, D = self._in_shape
            return d.reshape(N, H, r, W, r, D).sum(axis=(2, 4))
        out = np.zeros(self._in_shape)
        out[:, ::-r, ::-r] = d
        return out


# ---------------------------------------------------------------------------
# training spliced layers


def _batched(fn, X, batch=256):
    return np.concatenate([fn(X[i:i + batch]) for i in range(0, len(X), batch)])


def _franken_error(layer, F, y, split):
    logits = _batched(lambda f: split.net.run(layer.forward(f), split.s), F)
    return float(np.mean(np.argmax(logits, axis=1) != y))


def train_inserted_layer(layer, F, y, split, cfg=TrainConfig(), F_val=None, y_val=None, eval_every=None):
    """SGD on ``layer`` alone, feeding ``split.phi2(layer(F))`` into the log-loss.

    ``F`` holds precomputed lower-network features.  The downstream layers
    are back-propagated through but never updated.  Returns a history dict
    with error curves against the number of samples seen.
    """
    from .featnet import SGD, TrainingDivergedError

    rng = np.random.default_rng(cfg.seed)
    opt = SGD([layer], cfg)
    hist = {"samples": [], "train_error": [], "val_error": [], "loss": []}

    def record(seen):
        hist["samples"].append(seen)
        hist["train_error"].append(_franken_error(layer, F, y, split))
        if F_val is not None:
            hist["val_error"].append(_franken_error(layer, F_val, y_val, split))

    record(0)
    seen = 0
    next_eval = eval_every
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(F))
        lr = cfg.lr_at(epoch)
        total = 0.0
        for s in range(0, len(F), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = split.net.run(layer.forward(F[idx]), split.s)
            loss, grad = softmax_logloss(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            layer.backward(split.net.backward(grad, split.s))
            opt.step(lr)
            seen += len(idx)
            total += loss * len(idx)
            if next_eval is not None and seen >= next_eval:
                record(seen)
                next_eval += eval_every
        hist["loss"].append(total / len(F))
    if not hist["samples"] or hist["samples"][-1] != seen:
        record(seen)
    return hist


def _images_labels(data):
    if hasattr(data, "images"):
        return np.asarray(data.images), np.asarray(data.labels)
    X, y = data
    return np.asarray(X), np.asarray(y)


def _warp_all(images, g, pad="zero"):
    return np.stack([warp(x, g, interp="bilinear", pad=pad) for x in images])


def fit_translayer_regression(layer, F_in, F_target, lam=1e-6, chunk=128):
    """Weight-tied least-squares fit of ``layer``'s filters and bias, in place.

    Minimizes ``sum |layer(F_in) - F_target|^2 + lam * n * |W|^2`` over the
    live output sites, pooling all sites and samples into one ridge
    problem with ``m*m*D + 1`` unknowns per output channel.
    """
    F_in = np.asarray(F_in, dtype=np.float64)
    F_target = np.asarray(F_target, dtype=np.float64)
    m, D = layer.m, layer.D
    r = (m - 1) // 2
    live = ~layer.table.dead
    p = m * m * D
    XtX = np.zeros((p, p))
    XtY = np.zeros((p, D))
    xs, ys, n = np.zeros(p), np.zeros(D), 0
    for s in range(0, len(F_in), chunk):
        P = np.pad(layer.permute(F_in[s:s + chunk]), ((0, 0), (r, r), (r, r), (0, 0)))
        cols = np.lib.stride_tricks.sliding_window_view(P, (m, m), axis=(1, 2))  # (N, H, W, D, m, m)
        X = cols[:, live].transpose(0, 1, 3, 4, 2).reshape(-1, p)  # columns ordered (dy, dx, in)
        Y = F_target[s:s + chunk][:, live].reshape(-1, D)
        XtX += X.T @ X
        XtY += X.T @ Y
        xs += X.sum(axis=0)
        ys += Y.sum(axis=0)
        n += len(X)
    xm, ym = xs / n, ys / n
    G = XtX - n * np.outer(xm, xm)
    G[np.diag_indices_from(G)] += lam * n
    coef = np.linalg.solve(G, XtY - n * np.outer(xm, ym))
    layer.params["W"][...] = coef.reshape(m, m, D, D)
    layer.params["b"][...] = ym - xm @ coef
    return layer


def train_transformation_layer(split, g, dataset, cfg=None, m=3, mode="round", val=None, eval_every=None,
                               seed=0, init="identity"):
    """Task-oriented transformation layer for ``phi2 o M_g o phi1(g^-1 x)``.

    ``g`` is an image-space :class:`GeometricTransform`.  Returns
    ``(layer, history)``; ``history["val_error"]`` tracks the compensated
    validation error against samples seen.
    """
    if not isinstance(split, NetworkSplit):
        raise TypeError("split must be a NetworkSplit")
    cfg = cfg or TrainConfig(lr=0.01, epochs=3, seed=seed, weight_decay=0.0)
    X, y = _images_labels(dataset)
    ginv = g.inverse()
    F = split.phi1(_warp_all(X, ginv))
    H, W, D = F.shape[1:]
    table = build_permutation_table(split.geometry, g, mode, (H, W))
    layer = TransformationLayer(table, D, m, g=g, geometry=split.geometry)
    if init == "random":
        rng = np.random.default_rng(seed)
        layer.params["W"][...] = rng.standard_normal(layer.filters.shape) / math.sqrt(m * m * D)
    elif init == "regression":
        fit_translayer_regression(layer, F, split.phi1(X))
    elif init != "identity":
        raise ValueError(f"init must be 'identity', 'random' or 'regression', got {init!r}")
    F_val = y_val = None
    if val is not None:
        Xv, y_val = _images_labels(val)
        F_val = split.phi1(_warp_all(Xv, ginv))
    hist = train_inserted_layer(layer, F, y, split, cfg, F_val, y_val, eval_every)
    return layer, hist


def compensated_error(split, layer, g, data):
    """Error of ``phi2 o layer o phi1(g^-1 x)``; ``layer=None`` gives the uncompensated error."""
    X, y = _images_labels(data)
    F = split.phi1(_warp_all(X, g.inverse()))
    if layer is None:
        logits = split.phi2(F)
        return float(np.mean(np.argmax(logits, axis=1) != y))
    return _franken_error(layer, F, y, split)


def _reconcile(shape_a, shape_b):
    Ha, Wa, _ = shape_a
    Hb, Wb, _ = shape_b
    if (Ha, Wa) == (Hb, Wb):
        return None
    if Hb % Ha == 0 and Wb % Wa == 0 and Hb // Ha == Wb // Wa:
        return Hb // Ha
    if Ha % Hb == 0 and Wa % Wb == 0 and Ha // Hb == Wa // Wb:
        return -(Ha // Hb)
    raise ValueError(f"cannot reconcile feature grids {shape_a[:2]} and {shape_b[:2]}")


def fit_stitch_regression(layer, F_a, F_b, lam=1e-6, chunk=128):
    """Least-squares fit of a stitching layer's filters and bias, in place.

    Regresses net B's features ``F_b`` on the resampled, ``s x s``-patched
    features ``F_a`` of net A.
    """
    s, D = layer.s, layer.D_in
    r = (s - 1) // 2
    p = s * s * D
    XtX, XtY = np.zeros((p, p)), np.zeros((p, layer.D_out))
    xs, ys, n = np.zeros(p), np.zeros(layer.D_out), 0
    for i in range(0, len(F_a), chunk):
        A = np.pad(layer._resample(np.asarray(F_a[i:i + chunk], dtype=np.float64)), ((0, 0), (r, r), (r, r), (0, 0)))
        X = np.lib.stride_tricks.sliding_window_view(A, (s, s), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(-1, p)
        Y = np.asarray(F_b[i:i + chunk], dtype=np.float64).reshape(-1, layer.D_out)
        XtX += X.T @ X
        XtY += X.T @ Y
        xs += X.sum(axis=0)
        ys += Y.sum(axis=0)
        n += len(X)
    xm, ym = xs / n, ys / n
    G = XtX - n * np.outer(xm, xm)
    G[np.diag_indices_from(G)] += lam * n
    coef = np.linalg.solve(G, XtY - n * np.outer(xm, ym))
    layer.params["W"][...] = coef.reshape(s, s, D, layer.D_out)
    layer.params["b"][...] = ym - xm @ coef
    return layer


def learn_stitch(split_a, split_b, dataset, cfg=None, s=1, init="identity", val=None, eval_every=None, seed=0):
    """Train a stitching layer feeding ``phi1`` of net A into ``phi2'`` of net B.

    Returns ``(layer, history)``.  With ``cfg.epochs == 0`` the layer keeps
    its initialization.
    """
    cfg = cfg or TrainConfig(lr=0.01, epochs=3, seed=seed, weight_decay=0.0)
    X, y = _images_labels(dataset)
    F = split_a.phi1(X)
    resample = _reconcile(split_a.feature_shape, split_b.feature_shape)
    layer = StitchingLayer(split_a.feature_shape[2], split_b.feature_shape[2], s, resample,
                           "identity" if init == "regression" else init, seed)
    if init == "regression":
        fit_stitch_regression(layer, F, split_b.phi1(X))
    F_val = y_val = None
    if val is not None:
        Xv, y_val = _images_labels(val)
        F_val = split_a.phi1(Xv)
    hist = train_inserted_layer(layer, F, y, split_b, cfg, F_val, y_val, eval_every)
    return layer, hist


def evaluate_franken(split_a, stitch, split_b, testset):
    """Top-1 error of ``phi2' o stitch o phi1`` on ``testset``."""
    X, y = _images_labels(testset)
    return _franken_error(stitch, split_a.phi1(X), y, split_b)


# ---------------------------------------------------------------------------
# serialization


def save_layer(layer, directory):
    """Write ``manifest.json`` plus ``EQF1`` tensors for a transformation or stitching layer.

    Transformation layers store their permutation table as an ``(n, 3)``
    tensor of ``(out_site, in_site, weight)`` triplets.
    """
    import json
    from pathlib import Path

    from .fields import write_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in layer.params.items():
        tensors[name] = {"file": f"{name}.eqf", "shape": write_tensor(directory / f"{name}.eqf", arr)}
    manifest = {"kind": layer.kind, "tensors": tensors}
    if isinstance(layer, TransformationLayer):
        t = layer.table
        trip = np.column_stack([t.out_site, t.in_site, t.weight]).astype(np.float64)
        dead = t.dead.astype(np.float64)
        tensors["table"] = {"file": "table.eqf", "shape": write_tensor(directory / "table.eqf", trip.reshape(-1, 3))}
        tensors["dead"] = {"file": "dead.eqf", "shape": write_tensor(directory / "dead.eqf", dead)}
        geo = layer.geometry or Geometry()
        manifest.update({"D": layer.D, "m": layer.m, "mode": t.mode, "dims": list(t.dims),
                         "g": layer.g.to_json() if layer.g is not None else None,
                         "geometry": {"stride": geo.stride, "offset": list(geo.offset)}})
    else:
        manifest.update({"D_in": layer.D_in, "D_out": layer.D_out, "s": layer.s, "resample": layer.resample})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory / "manifest.json"


def load_layer(directory):
    import json
    from pathlib import Path

    from .fields import read_tensor

    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    arrays = {k: read_tensor(directory / v["file"], v["shape"]) for k, v in man["tensors"].items()}
    if man["kind"] == "translayer":
        trip = arrays["table"].reshape(-1, 3)
        table = PermutationTable(tuple(man["dims"]), trip[:, 0].astype(np.int64), trip[:, 1].astype(np.int64),
                                 trip[:, 2].copy(), arrays["dead"].astype(bool), man["mode"])
        g = GeometricTransform.from_json(man["g"]) if man.get("g") else None
        geo = Geometry(man["geometry"]["stride"], tuple(man["geometry"]["offset"]))
        return TransformationLayer(table, man["D"], man["m"], arrays["W"], arrays["b"], g=g, geometry=geo)
    if man["kind"] == "stitch":
        layer = StitchingLayer(man["D_in"], man["D_out"], man["s"], man["resample"])
        layer.params["W"][...] = arrays["W"]
        layer.params["b"][...] = arrays["b"]
        return layer
    raise ValueError(f"unknown layer kind {man['kind']!r}")
