"""Learning equivariant maps ``phi(gx) ~ A_g phi(x) + b_g`` from image pairs.

Each output component (one row of ``A_g``) is an independent regression
problem.  Rows are solved by least squares (``ls``), ridge regression
(``rr``) or greedy forward selection (``fs``), optionally restricted to the
``m x m`` input sites nearest to the back-projected output site.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import check_finite
from .fields import FeatureField, Geometry
from .imaging import GeometricTransform, warp

__all__ = [
    "EquivariantMap",
    "RegressionConfig",
    "PairSet",
    "EquivariantMapRegressor",
    "back_project",
    "neighborhood",
    "is_interior",
    "assemble_pairs",
    "solve_row",
    "forward_select",
    "learn_map",
    "evaluate_map",
    "learn_map_task",
]

log = logging.getLogger(__name__)

INF = math.inf


# ---------------------------------------------------------------------------
# the map


@dataclass
class EquivariantMap:
    """Sparse affine map between feature fields.

    ``A`` is a CSR matrix of shape ``(H*W*D, H_in*W_in*D_in)`` whose row
    ``(v*W + u)*D + t`` predicts channel ``t`` of output site ``(u, v)``.
    Rows outside ``valid`` were not learned and are identically zero.
    """

    A: sp.csr_matrix
    bias: np.ndarray
    shape: tuple
    in_shape: tuple
    g: GeometricTransform | None = None
    method: str = ""
    k: float = INF
    m: float = INF
    lam: float = 0.0
    valid: np.ndarray | None = None
    fit_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.shape = tuple(int(s) for s in self.shape)
        self.in_shape = tuple(int(s) for s in self.in_shape)
        if self.valid is None:
            self.valid = np.ones(self.shape[:2], dtype=bool)
        if self.A.shape != (int(np.prod(self.shape)), int(np.prod(self.in_shape))):
            raise ValueError(f"A has shape {self.A.shape}, expected rows/cols for {self.shape}/{self.in_shape}")
        if not np.all(np.isfinite(self.A.data)) or not np.all(np.isfinite(self.bias)):
            raise ValueError("map has non-finite coefficients")

    @classmethod
    def from_triplets(cls, shape, in_shape, rows, cols, coefs, bias, **kw):
        n_out, n_in = int(np.prod(shape)), int(np.prod(in_shape))
        A = sp.csr_matrix((np.asarray(coefs, float), (np.asarray(rows), np.asarray(cols))), shape=(n_out, n_in))
        return cls(A, bias, shape, in_shape, **kw)

    @classmethod
    def identity(cls, shape, g=None):
        n = int(np.prod(shape))
        return cls(sp.identity(n, format="csr"), np.zeros(n), shape, shape, g=g, method="none", k=1, m=1)

    def apply(self, f):
        """Apply to a field, an ``(H, W, D)`` array or a batch ``(N, H, W, D)``."""
        geometry = f.geometry if isinstance(f, FeatureField) else None
        a = f.data if isinstance(f, FeatureField) else np.asarray(f, dtype=np.float64)
        single = a.ndim == 3
        batch = a.reshape(1 if single else a.shape[0], -1)
        out = (self.A @ batch.T).T + self.bias
        out = out.reshape((-1,) + self.shape)
        if single:
            out = out[0]
            return FeatureField(out, geometry) if geometry is not None else out
        return out

    def transpose_apply(self, w):
        """``A^T w`` for a template ``w`` over the output field."""
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        return (self.A.T @ w).reshape(self.in_shape)

    def offset_score(self, w):
        """``<w, b>``: the constant added to every score by the bias."""
        return float(np.dot(np.asarray(w, dtype=np.float64).reshape(-1), self.bias))

    def row(self, i):
        s = slice(self.A.indptr[i], self.A.indptr[i + 1])
        return self.A.indices[s].copy(), self.A.data[s].copy()

    def row_nnz(self):
        return np.diff(self.A.indptr)

    def to_triplets(self):
        coo = self.A.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def header(self):
        return {
            "shape": list(self.shape),
            "in_shape": list(self.in_shape),
            "g": self.g.matrix.tolist() if self.g is not None else None,
            "g_name": self.g.name if self.g is not None else "",
            "method": self.method,
            "k": None if self.k == INF else self.k,
            "m": None if self.m == INF else self.m,
            "lam": self.lam,
            "fit_time": self.fit_time,
            "nnz": int(self.A.nnz),
            "valid": np.flatnonzero(self.valid.ravel()).tolist(),
            "meta": self.meta,
        }

    def save(self, path):
        """JSON header, then ``(u32 row, u32 col, f64 coef)`` triplets, then the bias.

        File layout: ``u32`` header length, UTF-8 JSON header, ``nnz``
        little-endian triplets, ``H*W*D`` little-endian float64 biases.
        """
        head = json.dumps(self.header()).encode("utf-8")
        rows, cols, data = self.to_triplets()
        trip = np.empty(len(rows), dtype=[("r", "<u4"), ("c", "<u4"), ("v", "<f8")])
        trip["r"], trip["c"], trip["v"] = rows, cols, data
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            f.write(trip.tobytes())
            f.write(self.bias.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        buf = Path(path).read_bytes()
        (hlen,) = struct.unpack_from("<I", buf, 0)
        head = json.loads(buf[4:4 + hlen].decode("utf-8"))
        off = 4 + hlen
        dt = np.dtype([("r", "<u4"), ("c", "<u4"), ("v", "<f8")])
        trip = np.frombuffer(buf, dtype=dt, count=head["nnz"], offset=off)
        off += dt.itemsize * head["nnz"]
        n_out = int(np.prod(head["shape"]))
        bias = np.frombuffer(buf, dtype="<f8", count=n_out, offset=off).copy()
        valid = np.zeros(int(np.prod(head["shape"][:2])), dtype=bool)
        valid[head["valid"]] = True
        g = GeometricTransform(np.array(head["g"]), head.get("g_name", "")) if head["g"] is not None else None
        return cls.from_triplets(
            head["shape"], head["in_shape"], trip["r"].astype(np.int64), trip["c"].astype(np.int64),
            trip["v"], bias, g=g, method=head["method"],
            k=INF if head["k"] is None else head["k"], m=INF if head["m"] is None else head["m"],
            lam=head["lam"], valid=valid.reshape(head["shape"][:2]), fit_time=head["fit_time"],
            meta=head.get("meta", {}))


@dataclass(frozen=True)
class RegressionConfig:
    """Solver choice for :func:`learn_map`.

    ``method`` is ``"ls"``, ``"rr"`` (ridge, strength ``lam``) or ``"fs"``
    (forward selection of ``k`` coefficients per row).  ``m`` is the
    neighborhood size; ``math.inf`` means unstructured.
    """

    method: str = "fs"
    k: float = 5
    m: float = 3
    lam: float = 0.0
    metric: str = "hellinger"

    def __post_init__(self):
        method = self.method.lower()
        object.__setattr__(self, "method", method)
        if method not in ("ls", "rr", "fs"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if method == "fs" and (self.k < 0 or (self.k != INF and int(self.k) != self.k)):
            raise ValueError(f"k must be a nonnegative integer, got {self.k}")
        if self.m != INF and (self.m < 1 or int(self.m) != self.m):
            raise ValueError(f"m must be a positive integer or inf, got {self.m}")
        if self.metric not in ("l2", "hellinger", "chi2"):
            raise ValueError(f"unknown metric {self.metric!r}")


# ---------------------------------------------------------------------------
# neighborhoods


def back_project(p_out, p_in, g, uv):
    """``p_in^-1 o g^-1 o p_out`` applied to output sites ``uv`` (..., 2)."""
    return p_in.to_grid(g.inverse().apply(p_out.to_image(uv)))


def _nearest_in_window(point, count, in_dims, radius):
    H, W = in_dims
    c = np.clip(np.floor(point + 0.5), [0, 0], [W - 1, H - 1]).astype(np.int64)
    u0, u1 = max(c[0] - radius, 0), min(c[0] + radius, W - 1)
    v0, v1 = max(c[1] - radius, 0), min(c[1] + radius, H - 1)
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    uu, vv = uu.ravel(), vv.ravel()
    d2 = (uu - point[0]) ** 2 + (vv - point[1]) ** 2
    order = np.argsort(d2, kind="stable")[:count]
    return uu[order], vv[order], d2[order], c


def neighborhood(p_out, p_in, g, m, site, in_dims):
    """The ``m*m`` input sites nearest to the back-projection of ``site``.

    Only sites inside the ``in_dims = (H, W)`` grid are eligible; ties are
    broken by ``(v, u)``.  Returns an ``(n, 2)`` integer array of ``(u, v)``
    sorted by distance.  ``m = inf`` returns every input site.
    """
    H, W = in_dims
    point = back_project(p_out, p_in, g, np.asarray(site, dtype=np.float64))
    count = H * W if m == INF else min(int(m) * int(m), H * W)
    if m != INF:
        radius = int(m)
        while True:
            uu, vv, d2, c = _nearest_in_window(point, count, in_dims, radius)
            covers_grid = radius >= max(H, W)
            if len(uu) == count:
                # any site outside the window is at least this far away
                gap = radius + 1 - np.max(np.abs(point - c))
                if covers_grid or (gap > 0 and d2[-1] < gap * gap):
                    return np.stack([uu, vv], axis=1)
            if covers_grid:
                return np.stack([uu, vv], axis=1)
            radius *= 2
    vv, uu = np.mgrid[0:H, 0:W]
    uu, vv = uu.ravel(), vv.ravel()
    d2 = (uu - point[0]) ** 2 + (vv - point[1]) ** 2
    order = np.argsort(d2, kind="stable")
    return np.stack([uu[order], vv[order]], axis=1)


def is_interior(p_out, p_in, g, m, site, in_dims):
    """True when the unclipped ``m*m`` neighborhood lies inside the input grid.

    For ``m = inf`` the back-projected point itself must fall inside the
    grid's site range.
    """
    H, W = in_dims
    point = back_project(p_out, p_in, g, np.asarray(site, dtype=np.float64))
    if m == INF:
        return bool(0 <= point[0] <= W - 1 and 0 <= point[1] <= H - 1)
    big = (H + 4 * int(m) + 4, W + 4 * int(m) + 4)
    shift = 2 * int(m) + 2
    nb = neighborhood(Geometry(), Geometry(), GeometricTransform.identity(), m, point + shift, big) - shift
    return bool(np.all(nb >= 0) and np.all(nb[:, 0] < W) and np.all(nb[:, 1] < H))


# ---------------------------------------------------------------------------
# training pairs


@dataclass
class PairSet:
    """Feature pairs ``(phi(x_i), phi(g x_i))`` with the retained output sites."""

    inputs: np.ndarray
    targets: np.ndarray
    valid: np.ndarray
    geometry: Geometry
    in_geometry: Geometry
    g: GeometricTransform

    def __len__(self):
        return len(self.inputs)

    def pairs(self):
        """Yield ``(phi(x), phi(gx))`` fields; invalid target sites are zeroed."""
        for x, y in zip(self.inputs, self.targets):
            yield FeatureField(x, self.in_geometry), FeatureField(y * self.valid[..., None], self.geometry)


def _extract(extractor, images):
    if hasattr(extractor, "features"):
        return extractor.features(images)
    return np.stack([np.asarray(getattr(f, "data", f)) for f in map(extractor, images)])


def _geometry_of(extractor):
    geo = getattr(extractor, "geometry", None)
    if geo is None:
        raise ValueError("extractor must expose a receptive-field `geometry`")
    return geo


def valid_sites(p_out, p_in, g, m, out_dims, in_dims, crop="interior"):
    """Boolean ``(H, W)`` mask of output sites kept by the crop policy."""
    H, W = out_dims
    if crop == "none":
        return np.ones((H, W), dtype=bool)
    if crop != "interior":
        raise ValueError(f"unknown crop policy {crop!r}")
    mask = np.zeros((H, W), dtype=bool)
    for v in range(H):
        for u in range(W):
            mask[v, u] = is_interior(p_out, p_in, g, m, (u, v), in_dims)
    return mask


def assemble_pairs(images, g, extractor, crop="interior", m=3, interp="bilinear", pad="replicate"):
    """Extract ``phi(x)`` and ``phi(gx)`` for every image.

    ``g`` is a :class:`GeometricTransform` in image coordinates.  With
    ``crop="interior"`` only output sites whose ``m*m`` neighborhood is fully
    inside the input grid are retained (``valid`` mask); ``crop="none"``
    keeps all sites.
    """
    images = np.asarray(images, dtype=np.float64)
    warped = np.stack([warp(x, g, interp=interp, pad=pad) for x in images])
    X = _extract(extractor, images)
    Y = _extract(extractor, warped)
    geo = _geometry_of(extractor)
    valid = valid_sites(geo, geo, g, m, Y.shape[1:3], X.shape[1:3], crop)
    if not valid.any():
        raise ValueError("transformation pushes every output site out of bounds")
    return PairSet(X, Y, valid, geo, geo, g)


# ---------------------------------------------------------------------------
# per-row solvers


def _center(X, Y):
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    return X - xm, Y - ym, xm, ym


def _ridge(Xc, Yc, lam):
    """Ridge on centered data: ``(X^T X + lam I)^-1 X^T y``."""
    n, p = Xc.shape
    reg = lam
    if p <= n:
        G = Xc.T @ Xc
        G[np.diag_indices(p)] += reg
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), Xc.T @ Yc)
    K = Xc @ Xc.T
    K[np.diag_indices(n)] += reg
    return Xc.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), Yc)


def forward_select(X, Y, k, candidates=None, tol=1e-12):
    """Greedy forward selection for each column of ``Y`` (shared design ``X``).

    At every step the column with the largest squared correlation with the
    current residual, ``(x^T r)^2 / |x|^2`` on centered data, is added and
    all selected coefficients are refit by least squares (orthogonal
    matching pursuit).  Columns already spanned by the support are skipped.
    Selection stops early once the residual vanishes.  Ties go to the
    lowest column.

    Returns ``(support, coef, intercept)`` with ``support`` an ``(r, k)``
    array padded with ``-1``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, p = X.shape
    r = Y.shape[1]
    k = int(min(k, p))
    Xc, Yc, xm, ym = _center(X, Y)
    support = -np.ones((r, k), dtype=np.int64)
    coef = np.zeros((r, k))
    if k == 0 or r == 0:
        return support, coef, ym.copy()
    base = np.sum(Xc * Xc, axis=0)
    cn2 = np.broadcast_to(base, (r, p)).copy()
    usable = cn2 > tol * max(base.max(initial=0.0), 1e-300)
    if candidates is not None:
        usable &= candidates
    R = Yc.copy()
    y2 = np.sum(Yc * Yc, axis=0)
    Q = np.zeros((r, k, n))
    Rfac = np.zeros((r, k, k))
    beta = np.zeros((r, k))
    active = y2 > 0
    rows = np.arange(r)
    for step in range(k):
        C = (Xc.T @ R).T
        ok = usable & (cn2 > tol * base)
        score = np.where(ok, C * C / np.where(ok, base, 1.0), -np.inf)
        j = np.argmax(score, axis=1)
        res2 = np.sum(R * R, axis=0)
        go = active & np.isfinite(score[rows, j]) & (res2 > 1e-24 * y2)
        if not go.any():
            break
        xs = Xc[:, j].T
        proj = np.einsum("rkn,rn->rk", Q[:, :step], xs)
        q = xs - np.einsum("rk,rkn->rn", proj, Q[:, :step])
        qn = np.linalg.norm(q, axis=1)
        go &= qn > 0
        q = np.where(go[:, None], q / np.where(qn > 0, qn, 1.0)[:, None], 0.0)
        Q[:, step] = q
        Rfac[:, :step, step] = np.where(go[:, None], proj, 0.0)
        Rfac[:, step, step] = np.where(go, qn, 1.0)
        beta[:, step] = np.where(go, np.einsum("rn,nr->r", q, R), 0.0)
        R -= q.T * beta[:, step]
        cn2 -= (q @ Xc) ** 2
        support[go, step] = j[go]
        usable[rows[go], j[go]] = False
        active &= go
    taken = support >= 0
    for i in range(k):
        if not taken[:, i].any():
            Rfac[:, i, i] = 1.0
    coef = np.linalg.solve(Rfac, beta[..., None])[..., 0]
    coef = np.where(taken, coef, 0.0)
    xsel = np.where(taken, xm[np.maximum(support, 0)], 0.0)
    intercept = ym - np.sum(xsel * coef, axis=1)
    return support, coef, intercept


def solve_row(X, y, cfg):
    """Fit one output component: returns ``(cols, coefs, bias)``.

    ``X`` is the ``(n, p)`` design restricted to the row's support, ``y``
    the ``n`` targets.  The bias is never penalized.  ``cols`` index the
    columns of ``X``.
    """
    X = check_finite(X, "design matrix")
    y = check_finite(y, "targets")
    if X.ndim != 2 or y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"expected X (n, p) and y (n,), got {X.shape} and {y.shape}")
    cols, coefs, bias = _solve_block(X, y[:, None], cfg)
    return cols[0], coefs[0], float(bias[0])


def _solve_block(X, Y, cfg):
    """Solve every column of ``Y`` against ``X``; lists of (cols, coefs) per target."""
    n, p = X.shape
    r = Y.shape[1]
    if cfg.method == "fs":
        support, coef, intercept = forward_select(X, Y, cfg.k)
        cols = [support[i][support[i] >= 0] for i in range(r)]
        coefs = [coef[i][support[i] >= 0] for i in range(r)]
        return cols, coefs, intercept
    Xc, Yc, xm, ym = _center(X, Y)
    if p == 0:
        B = np.zeros((0, r))
    elif cfg.method == "ls":
        B = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    else:
        B = _ridge(Xc, Yc, cfg.lam)
    intercept = ym - xm @ B
    allc = np.arange(p)
    return [allc] * r, [B[:, i] for i in range(r)], intercept


def _shared_solver(X, cfg):
    """Factor a design shared by many targets; returns ``(solve, column means)``.

    ``solve(Yc)`` maps centered targets to coefficients: the minimum-norm
    least-squares solution for ``ls``, the ridge solution for ``rr``.
    """
    Xc = X - X.mean(axis=0)
    n, p = Xc.shape
    if cfg.method == "ls":
        U, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
        cut = np.finfo(np.float64).eps * max(n, p) * (sv[0] if sv.size else 0.0)
        inv = np.where(sv > cut, 1.0 / np.where(sv > cut, sv, 1.0), 0.0)
        pinv = (Vt.T * inv) @ U.T
        return (lambda Yc: pinv @ Yc), X.mean(axis=0)
    reg = cfg.lam
    if p <= n:
        G = Xc.T @ Xc
        G[np.diag_indices(p)] += reg
        fac = scipy.linalg.cho_factor(G)
        return (lambda Yc: scipy.linalg.cho_solve(fac, Xc.T @ Yc)), X.mean(axis=0)
    K = Xc @ Xc.T
    K[np.diag_indices(n)] += reg
    fac = scipy.linalg.cho_factor(K)
    return (lambda Yc: Xc.T @ scipy.linalg.cho_solve(fac, Yc)), X.mean(axis=0)


# ---------------------------------------------------------------------------
# learning and evaluation


class EquivariantMapRegressor(RegressorMixin, BaseEstimator):
    """Learn ``M_g`` from paired feature fields, scikit-learn style.

    ``fit(X, Y)`` takes ``X = phi(x_i)`` and ``Y = phi(g x_i)`` as
    ``(N, H, W, D)`` arrays; ``predict`` maps input fields to predicted
    output fields.

    Parameters
    ----------
    g : GeometricTransform
        Image transformation (image coordinates).
    geometry : Geometry
        Receptive-field geometry of both fields.
    method : {"fs", "rr", "ls"}
    k : int
        Coefficients per row for ``fs``.
    m : int or inf
        Neighborhood size.
    lam : float
        Ridge strength for ``rr``.
    valid : ndarray of bool, optional
        Output sites to learn; defaults to all.
    """

    def __init__(self, g=None, geometry=None, method="fs", k=5, m=3, lam=0.1, valid=None, chunk=512):
        self.g = g
        self.geometry = geometry
        self.method = method
        self.k = k
        self.m = m
        self.lam = lam
        self.valid = valid
        self.chunk = chunk

    def fit(self, X, Y):
        X = check_finite(X, "input fields")
        Y = check_finite(Y, "target fields")
        if X.ndim != 4 or Y.ndim != 4 or len(X) != len(Y) or len(X) < 1:
            raise ValueError(f"expected paired (N, H, W, D) fields, got {X.shape} and {Y.shape}")
        cfg = RegressionConfig(self.method, self.k if self.method == "fs" else INF, self.m,
                               self.lam if self.method == "rr" else 0.0)
        g = self.g if self.g is not None else GeometricTransform.identity()
        geo = self.geometry if self.geometry is not None else Geometry()
        n = len(X)
        Hi, Wi, Di = X.shape[1:]
        Ho, Wo, Do = Y.shape[1:]
        valid = np.ones((Ho, Wo), bool) if self.valid is None else np.asarray(self.valid, bool)
        Xf = X.reshape(n, -1)
        rows, cols, coefs = [], [], []
        bias = np.zeros(Ho * Wo * Do)
        t0 = time.perf_counter()
        sites = [(u, v) for v in range(Ho) for u in range(Wo) if valid[v, u]]
        if cfg.m == INF:
            targets = np.array([(v * Wo + u) * Do + t for (u, v) in sites for t in range(Do)], dtype=np.int64)
            Yf = Y.reshape(n, -1)
            if cfg.method == "fs":
                for s in range(0, len(targets), self.chunk):
                    tg = targets[s:s + self.chunk]
                    c_, v_, b_ = _solve_block(Xf, Yf[:, tg], cfg)
                    for row, cc, vv in zip(tg, c_, v_):
                        rows.append(np.full(len(cc), row))
                        cols.append(cc)
                        coefs.append(vv)
                    bias[tg] = b_
            else:
                # every row shares the full design: factor once, emit dense CSR rows
                solve, xm = _shared_solver(Xf, cfg)
                p = Xf.shape[1]
                data = np.empty((len(targets), p))
                for s in range(0, len(targets), self.chunk):
                    tg = targets[s:s + self.chunk]
                    Yc = Yf[:, tg] - Yf[:, tg].mean(axis=0)
                    B = solve(Yc)
                    data[s:s + len(tg)] = B.T
                    bias[tg] = Yf[:, tg].mean(axis=0) - xm @ B
                counts = np.zeros(Ho * Wo * Do, dtype=np.int64)
                counts[targets] = p
                indptr = np.concatenate([[0], np.cumsum(counts)])
                indices = np.tile(np.arange(p, dtype=np.int32), len(targets))
                dense_A = sp.csr_matrix((data.ravel(), indices, indptr), shape=(Ho * Wo * Do, Xf.shape[1]))
                del data
        else:
            chan = np.arange(Di)
            for (u, v) in sites:
                nb = neighborhood(geo, geo, g, cfg.m, (u, v), (Hi, Wi))
                site_idx = nb[:, 1] * Wi + nb[:, 0]
                colmap = (site_idx[:, None] * Di + chan[None, :]).ravel()
                c_, v_, b_ = _solve_block(Xf[:, colmap], Y[:, v, u, :], cfg)
                base_row = (v * Wo + u) * Do
                for t, (cc, vv) in enumerate(zip(c_, v_)):
                    rows.append(np.full(len(cc), base_row + t))
                    cols.append(colmap[cc])
                    coefs.append(vv)
                bias[base_row:base_row + Do] = b_
        fit_time = time.perf_counter() - t0
        meta = dict(g=g, method=cfg.method, k=cfg.k, m=cfg.m, lam=cfg.lam, valid=valid, fit_time=fit_time)
        if cfg.m == INF and cfg.method != "fs":
            self.map_ = EquivariantMap(dense_A, bias, (Ho, Wo, Do), (Hi, Wi, Di), **meta)
        else:
            cat = (lambda a: np.concatenate(a) if a else np.zeros(0))
            self.map_ = EquivariantMap.from_triplets(
                (Ho, Wo, Do), (Hi, Wi, Di), cat(rows).astype(np.int64), cat(cols).astype(np.int64), cat(coefs),
                bias, **meta)
        self.fit_time_ = fit_time
        return self

    def predict(self, X):
        return self.map_.apply(np.asarray(X, dtype=np.float64))

    def score(self, X, Y, metric="l2"):
        """Negative mean per-cell distance over the learned sites."""
        return -map_errors(self.map_, np.asarray(X), np.asarray(Y), metric)["mean"]


def learn_map(extractor, g, images, cfg=RegressionConfig(), crop="interior", crop_m=None, pairs=None):
    """Learn ``M_g`` for ``extractor`` from training images.

    Returns an :class:`EquivariantMap` whose ``fit_time`` is the wall-clock
    time of the regression alone.  ``crop_m`` sets the neighborhood size
    used by the interior crop (defaults to ``cfg.m``, or 1 when unstructured).
    """
    if pairs is None:
        if len(images) < 1:
            raise ValueError("need at least one training image")
        cm = crop_m if crop_m is not None else (cfg.m if cfg.m != INF else 1)
        pairs = assemble_pairs(images, g, extractor, crop=crop, m=cm)
    est = EquivariantMapRegressor(g=pairs.g, geometry=pairs.geometry, method=cfg.method,
                                  k=cfg.k, m=cfg.m, lam=cfg.lam, valid=pairs.valid)
    est.fit(pairs.inputs, pairs.targets)
    est.map_.meta["n_train"] = len(pairs)
    log.info("learned %s map (k=%s m=%s lam=%s) in %.3fs", cfg.method, cfg.k, cfg.m, cfg.lam, est.fit_time_)
    return est.map_


def map_errors(M, X, Y, metric="hellinger"):
    """Per-cell error statistics of ``M`` on paired fields, over ``M.valid``."""
    from .hog import cell_distances

    pred = M.apply(X)
    if metric in ("hellinger", "chi2"):
        # predictions of a linear map can dip below zero
        pred = np.maximum(pred, 0.0)
        Y = np.maximum(Y, 0.0)
    d = cell_distances(pred, Y, metric)[:, M.valid]
    return {"mean": float(d.mean()), "median": float(np.median(d)), "std": float(d.std())}


def evaluate_map(M, extractor, g, images, metric="hellinger", pairs=None):
    """Held-out error of ``M`` with the identity ("none") and zero baselines.

    Returns a dict with ``mean``/``median``/``std`` of the per-cell distance
    ``|phi(gx) - M phi(x)|``, ``none_*`` for ``M = 1`` and ``norm_mean``, the
    average per-cell l2 norm of ``phi(gx)``.
    """
    if pairs is None:
        pairs = assemble_pairs(images, g, extractor, crop="none")
    X, Y = pairs.inputs, pairs.targets
    out = map_errors(M, X, Y, metric)
    if X.shape == Y.shape:
        ident = EquivariantMap.identity(Y.shape[1:])
        ident.valid = M.valid
        out.update({f"none_{k}": v for k, v in map_errors(ident, X, Y, metric).items()})
    out["norm_mean"] = float(np.sqrt(np.sum(Y * Y, axis=-1))[:, M.valid].mean())
    out["n"] = len(X)
    out["metric"] = metric
    return out


def learn_map_task(split, g, dataset, cfg=None, m=3, mode="round", val=None, probe=None,
                   eval_every=None, seed=0, init="identity"):
    """Train a transformation layer between ``phi1`` and ``phi2`` on the task loss.

    The network stays frozen; only the layer's filters and bias move.  The
    inputs are ``g^-1 x_i`` so that the layer learns to compensate ``g``.
    Returns ``(layer, history)`` where ``history`` lists train/validation
    errors against the number of training samples seen.
    """
    from .netsurgery import train_transformation_layer

    return train_transformation_layer(split, g, dataset, cfg=cfg, m=m, mode=mode, val=val,
                                      eval_every=eval_every, seed=seed, init=init)
