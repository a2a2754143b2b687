import csv
import json
import math

import numpy as np
import pytest

from equimap.analysis import (SCORE_SENTINEL, LinearHingeClassifier, MissingMapError, compensated_classification,
                              invariance_scores, invariant_layer, max_invariant_set, report_name, write_csv,
                              write_json)
from equimap.equilearn import EquivariantMap
from equimap.featnet import TrainConfig
from equimap.fields import Geometry
from equimap.hog import HOGTransformer
from equimap.imaging import GeometricTransform, parse_transform, synth_classification_set
from equimap.netsurgery import TransformationLayer, build_permutation_table, train_transformation_layer


def _layer(filters, bias=None):
    m, _, D, _ = filters.shape
    g = parse_transform("hflip", (16, 16))
    t = build_permutation_table(Geometry(2.0, (0.5, 0.5)), g, "round", (8, 8))
    return TransformationLayer(t, D, m, filters, bias, g)


def test_scores_known_values():
    W = np.zeros((3, 3, 2, 2))
    W[1, 1, 0, 0] = 3.0
    W[1, 1, 1, 0] = 4.0  # channel 0: |row| = 5, off-diagonal = 4
    W[1, 1, 1, 1] = 2.0  # channel 1: purely diagonal
    s = invariance_scores(W)
    assert s[0] == pytest.approx(5 / 4)
    assert s[1] == SCORE_SENTINEL


def test_off_center_same_channel_counts_as_off_diagonal():
    W = np.zeros((3, 3, 1, 1))
    W[1, 1, 0, 0] = 1.0
    W[0, 1, 0, 0] = 1.0
    assert invariance_scores(W)[0] == pytest.approx(math.sqrt(2))


def test_invariant_layer_replaces_rows(rng):
    L = _layer(rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3))
    out = invariant_layer(L, [1])
    assert out.filters[1, 1, 1, 1] == L.filters[1, 1, 1, 1]
    assert np.count_nonzero(out.filters[..., 1]) == 1
    np.testing.assert_array_equal(out.filters[..., [0, 2]], L.filters[..., [0, 2]])
    np.testing.assert_array_equal(out.bias, L.bias)
    assert np.count_nonzero(L.filters[..., 1]) > 1  # original untouched


@pytest.fixture(scope="module")
def trained_layer(small_net):
    net, tr, te = small_net
    g = parse_transform("hflip", (32, 32))
    layer, _ = train_transformation_layer(net.probe(1), g, tr,
                                          TrainConfig(lr=1e-3, epochs=1, weight_decay=0.0))
    return net, layer, te, g


def test_infinite_tolerance_accepts_everything(trained_layer):
    net, layer, te, g = trained_layer
    rep = max_invariant_set(layer, net.probe(1), te, g, rel_tol=math.inf)
    assert rep.p == rep.D == 16
    assert rep.channels == list(range(16))


def test_search_result_satisfies_criterion(trained_layer):
    net, layer, te, g = trained_layer
    rep = max_invariant_set(layer, net.probe(1), te, g, rel_tol=0.05)
    assert 0 <= rep.p <= rep.D
    assert rep.error_invariant <= rep.error_full * 1.05 + 1e-12
    top = [int(c) for c in rep.order[:rep.p]]
    assert sorted(top) == rep.channels
    scores = np.array(rep.scores)
    if 0 < rep.p < rep.D:
        assert scores[rep.order[rep.p - 1]] >= scores[rep.order[rep.p]]
    d = rep.to_dict()
    json.dumps(d)
    assert {"p", "error", "passes"} <= set(rep.rows()[0])


def test_hinge_classifier_on_fields():
    tr = synth_classification_set(0, 200, 2, 64)
    F = HOGTransformer().features(tr.images)
    clf = LinearHingeClassifier().fit(F, tr.labels)
    assert clf.score(F, tr.labels) > 0.9
    assert clf.get_params()["alpha"] == 1e-4


def test_compensated_classification_identity_point():
    tr = synth_classification_set(0, 120, 2, 64)
    te = synth_classification_set(0, 60, 2, 64, "test")
    ext = HOGTransformer()
    clf = LinearHingeClassifier().fit(ext.features(tr.images), tr.labels)
    grid = [("rot:0", GeometricTransform.identity())]
    rows = compensated_classification(clf, {"rot:0": EquivariantMap.identity((8, 8, 31))}, grid, ext, te)
    assert rows[0]["original"] == rows[0]["uncompensated"] == rows[0]["compensated"]
    with pytest.raises(MissingMapError):
        compensated_classification(clf, {}, grid, ext, te)


def test_reports(tmp_path):
    assert report_name("stitch", "rot:45", "probe 1") == "stitch-rot45-probe1.csv"
    p = write_csv([{"a": 1, "b": 2}, {"a": 3, "c": 4}], tmp_path / "x.csv")
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["a", "b", "c"] and len(rows) == 3
    q = write_json({"x": np.float64(1.5), "y": float("inf")}, tmp_path / "x.json")
    assert json.loads(q.read_text()) == {"x": 1.5, "y": "inf"}
