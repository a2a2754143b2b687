"""Invariance scores, compensated classification and experiment reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import SGDClassifier

from .equilearn import _extract
from .imaging import warp
from .netsurgery import TransformationLayer, _franken_error, _images_labels, _warp_all

__all__ = [
    "SCORE_SENTINEL",
    "InvarianceReport",
    "NonMonotoneWarning",
    "MissingMapError",
    "invariance_scores",
    "invariant_layer",
    "max_invariant_set",
    "LinearHingeClassifier",
    "compensated_classification",
    "report_name",
    "write_csv",
    "write_json",
]

log = logging.getLogger(__name__)

SCORE_SENTINEL = 1e12


class NonMonotoneWarning(UserWarning):
    """The error-vs-p predicate evaluated during the search was not monotone."""


class MissingMapError(KeyError):
    """No equivariant map was supplied for a requested grid point."""


def invariance_scores(layer):
    """Per output channel: ``||row|| / ||row without its diagonal||``.

    The diagonal component of channel ``t`` is the coefficient linking input
    channel ``t`` at the filter's center tap.  Channels whose off-diagonal
    part vanishes get :data:`SCORE_SENTINEL`.
    """
    Wf = layer.filters if isinstance(layer, TransformationLayer) else np.asarray(layer)
    m, _, D, Dout = Wf.shape
    c = (m - 1) // 2
    scores = np.empty(Dout)
    for t in range(Dout):
        row = Wf[:, :, :, t]
        full = float(np.sqrt(np.sum(row * row)))
        diag = row[c, c, t] if t < D else 0.0
        off = math.sqrt(max(full * full - diag * diag, 0.0))
        scores[t] = SCORE_SENTINEL if off <= 1e-15 * max(full, 1.0) else full / off
    return scores


def _ranking(scores):
    # highest score first, lowest channel index among ties
    return np.lexsort((np.arange(len(scores)), -scores))


def invariant_layer(layer, channels):
    """Copy of ``layer`` with ``channels`` replaced by scaled identity rows.

    The scale is the channel's original diagonal coefficient; the bias is kept.
    """
    out = layer.copy()
    c = (layer.m - 1) // 2
    for t in channels:
        alpha = layer.filters[c, c, t, t]
        out.params["W"][:, :, :, t] = 0.0
        out.params["W"][c, c, t, t] = alpha
    return out


@dataclass
class InvarianceReport:
    """Outcome of the invariant-channel search for one transform and probe."""

    scores: list
    order: list
    p: int
    channels: list
    D: int
    rel_tol: float
    error_full: float
    error_invariant: float
    error_original: float | None = None
    error_uncompensated: float | None = None
    evaluations: list = field(default_factory=list)
    monotone: bool = True

    def to_dict(self):
        d = asdict(self)
        d["scores"] = [min(float(s), SCORE_SENTINEL) for s in self.scores]
        return d

    def rows(self):
        return [{"p": p, "error": e, "passes": ok} for p, e, ok in sorted(self.evaluations)]


def max_invariant_set(layer, split, dataset, g=None, rel_tol=0.05, features=None):
    """Largest ``p`` such that making the top-``p`` channels invariant keeps
    ``err <= (1 + rel_tol) * err(M_g)`` on ``dataset`` (top-1 error).

    ``g`` defaults to ``layer.g``; ``features`` may supply precomputed
    ``phi1(g^-1 x)``.  Binary search assumes the predicate is monotone in
    ``p``; a :class:`NonMonotoneWarning` is issued when the evaluated points
    contradict that.
    """
    g = g if g is not None else layer.g
    X, y = _images_labels(dataset)
    F = features if features is not None else split.phi1(_warp_all(X, g.inverse()))
    scores = invariance_scores(layer)
    order = _ranking(scores)
    D = layer.D
    base = _franken_error(layer, F, y, split)
    limit = base * (1.0 + rel_tol) if math.isfinite(rel_tol) else math.inf
    cache = {0: base}

    def err(p):
        if p not in cache:
            cache[p] = _franken_error(invariant_layer(layer, order[:p]), F, y, split)
        return cache[p]

    def ok(p):
        return err(p) <= limit + 1e-12

    lo, hi = 0, D
    if ok(D):
        lo = D
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                lo = mid
            else:
                hi = mid
    evals = [(p, e, bool(e <= limit + 1e-12)) for p, e in cache.items()]
    # monotone: no failing p below a passing p
    monotone = not any(a[0] < b[0] and not a[2] and b[2] for a in evals for b in evals)
    if not monotone:
        warnings.warn("invariance predicate is not monotone in p over the evaluated points", NonMonotoneWarning)
    return InvarianceReport(scores=scores.tolist(), order=order.tolist(), p=int(lo), channels=sorted(order[:lo].tolist()),
                            D=D, rel_tol=rel_tol, error_full=base, error_invariant=err(lo),
                            evaluations=evals, monotone=monotone)


# ---------------------------------------------------------------------------
# compensated classification


class LinearHingeClassifier(SGDClassifier):
    """L2-regularized linear hinge-loss classifier trained by SGD.

    A fixed-seed :class:`sklearn.linear_model.SGDClassifier`; accepts feature
    fields ``(N, H, W, D)`` as well as flat rows.
    """

    def __init__(self, alpha=1e-4, max_iter=50, tol=1e-4, random_state=0):
        super().__init__(loss="hinge", penalty="l2", alpha=alpha, max_iter=max_iter, tol=tol,
                         random_state=random_state, average=True)

    @staticmethod
    def _flat(X):
        X = np.asarray(X, dtype=np.float64)
        return X.reshape(len(X), -1)

    def fit(self, X, y, **kw):
        return super().fit(self._flat(X), y, **kw)

    def decision_function(self, X):
        return super().decision_function(self._flat(X))

    def predict(self, X):
        return super().predict(self._flat(X))

    def score(self, X, y, sample_weight=None):
        return super().score(self._flat(X), y, sample_weight)


def compensated_classification(clf, maps, grid, extractor, testset, pad="replicate"):
    """Accuracy of ``clf`` on transformed test images, with and without compensation.

    ``grid`` is a list of ``(name, g)``; ``maps[name]`` is the learned
    ``M_g``.  For each point, test images become ``g^-1 x`` and three
    accuracies are reported: ``original`` on ``phi(x)``, ``uncompensated`` on
    ``phi(g^-1 x)`` and ``compensated`` on ``M_g phi(g^-1 x)``.
    """
    X, y = _images_labels(testset)
    original = float(np.mean(clf.predict(_extract(extractor, X)) == y))
    rows = []
    for name, g in grid:
        if name not in maps:
            raise MissingMapError(name)
        ginv = g.inverse()
        Xg = np.stack([warp(x, ginv, interp="bilinear", pad=pad) for x in X])
        Fg = _extract(extractor, Xg)
        unc = float(np.mean(clf.predict(Fg) == y))
        comp = float(np.mean(clf.predict(maps[name].apply(Fg)) == y))
        rows.append({"transform": name, "original": original, "uncompensated": unc, "compensated": comp})
        log.info("%s: original %.3f uncompensated %.3f compensated %.3f", name, original, unc, comp)
    return rows


# ---------------------------------------------------------------------------
# reports


def report_name(experiment, transform, probe):
    """``<experiment>-<transform>-<probe>.csv`` with filesystem-safe parts."""
    def clean(s):
        return re.sub(r"[^A-Za-z0-9_.-]+", "", str(s))
    return f"{clean(experiment)}-{clean(transform)}-{clean(probe)}.csv"


def write_csv(rows, path):
    """Write a list of dicts as CSV with a header row (union of keys, first-seen order)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _jsonable(o):
    """Plain JSON values; non-finite floats become the strings ``"inf"``, ``"-inf"``, ``"nan"``."""
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return o


def write_json(obj, path):
    """Write ``obj`` as strict JSON (sorted keys, two-space indent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path
