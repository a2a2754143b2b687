import numpy as np
import pytest

from equimap.equilearn import INF, EquivariantMap
from equimap.featnet import TrainConfig, grad_check
from equimap.fields import Geometry
from equimap.imaging import GeometricTransform, parse_transform, synth_classification_set, transform_point
from equimap.netsurgery import (StitchingLayer, SupportViolationError, TransformationLayer, build_permutation_table,
                                compensated_error, evaluate_franken, fit_translayer_regression, learn_stitch,
                                load_layer, map_to_translayer, save_layer, train_transformation_layer,
                                translayer_apply, translayer_to_map)

GEO = Geometry(2.0, (0.0, 0.0))


def _sites_from_points(geo, g, dims):
    H, W = dims
    out = {}
    for v in range(H):
        for u in range(W):
            x = transform_point(g.inverse(), geo.to_image((u, v)))
            out[(u, v)] = tuple(np.floor(geo.to_grid(x) + 0.5).astype(int))
    return out


@pytest.mark.parametrize("spec", ["rot90", "hflip", "vflip", "rot180"])
def test_round_table_matches_pointwise_backprojection(spec):
    # square grid whose geometry is centered on the image: lattice-exact transforms
    geo = Geometry(4.0, (1.5, 1.5))
    g = parse_transform(spec, (32, 32))
    t = build_permutation_table(geo, g, "round", (8, 8))
    ref = _sites_from_points(geo, g, (8, 8))
    look = t.lookup()
    assert not t.dead.any()
    for (u, v), src in ref.items():
        assert look[(u, v)] == [(src, 1.0)]
    # a bijection: every input site used exactly once
    assert sorted(t.in_site.tolist()) == list(range(64))


def test_bilinear_table_weights():
    g = parse_transform("rot:30", (16, 16))
    t = build_permutation_table(GEO, g, "bilinear", (8, 8))
    M = t.matrix()
    sums = np.asarray(M.sum(axis=1)).ravel()
    live = ~t.dead.ravel()
    np.testing.assert_allclose(sums[live], 1.0)
    assert np.all(sums[~live] == 0)
    assert (t.weight > 0).all() and (t.weight <= 1).all()


def test_dead_sites_output_zero(rng):
    g = GeometricTransform.translation_by(8.0, 0.0)  # 4 sites at stride 2
    t = build_permutation_table(GEO, g, "round", (6, 6))
    assert t.dead[:, :4].all() and not t.dead[:, 4:].any()
    L = TransformationLayer(t, 2, 3, rng.standard_normal((3, 3, 2, 2)), np.ones(2))
    out = L.forward(rng.standard_normal((1, 6, 6, 2)))
    assert np.all(out[0, :, :4] == 0)


def test_identity_layer_permutes_exactly(rng):
    g = parse_transform("rot90", (16, 16))
    geo = Geometry(2.0, (0.5, 0.5))
    t = build_permutation_table(geo, g, "round", (8, 8))
    f = rng.standard_normal((8, 8, 3))
    out = translayer_apply(TransformationLayer(t, 3, 3), f)
    ref = np.rot90(f, 1, axes=(0, 1)) if np.allclose(out, np.rot90(f, 1, axes=(0, 1))) else np.rot90(f, -1, axes=(0, 1))
    np.testing.assert_allclose(out, ref)


@pytest.mark.parametrize("mode", ["round", "bilinear"])
@pytest.mark.parametrize("spec", ["hflip", "rot90", "rot:30", "scale:1.3"])
def test_layer_equals_expanded_map(rng, mode, spec):
    g = parse_transform(spec, (16, 16))
    t = build_permutation_table(GEO, g, mode, (8, 8))
    L = TransformationLayer(t, 3, 3, rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3), g, GEO)
    f = rng.standard_normal((8, 8, 3))
    np.testing.assert_allclose(translayer_apply(L, f), translayer_to_map(L).apply(f), atol=1e-12)


@pytest.mark.parametrize("spec", ["hflip", "vflip", "rot90", "rot180"])
def test_map_to_translayer_roundtrip(rng, spec):
    geo = Geometry(4.0, (1.5, 1.5))
    g = parse_transform(spec, (32, 32))
    t = build_permutation_table(geo, g, "round", (8, 8))
    L = TransformationLayer(t, 2, 3, rng.standard_normal((3, 3, 2, 2)), rng.standard_normal(2), g, geo)
    M = translayer_to_map(L)
    L2, residual = map_to_translayer(M, g, 3, geo, check_support=False)
    assert residual < 1e-10
    np.testing.assert_allclose(L2.filters, L.filters, atol=1e-12)
    np.testing.assert_allclose(L2.bias, L.bias, atol=1e-12)


def test_support_violation_detected():
    geo = Geometry(4.0, (1.5, 1.5))
    g = parse_transform("hflip", (32, 32))
    D, n = 1, 64
    # output site (0, 0) reads from the far corner of the grid, outside its 3x3 neighborhood
    M = EquivariantMap.from_triplets((8, 8, D), (8, 8, D), [0], [n - 1], [1.0], np.zeros(n), g=g, m=3)
    with pytest.raises(SupportViolationError):
        map_to_translayer(M, g, 3, geo)


@pytest.mark.parametrize("mode", ["round", "bilinear"])
def test_translayer_gradients(rng, mode):
    g = parse_transform("rot:30", (16, 16))
    L = TransformationLayer(build_permutation_table(GEO, g, mode, (8, 8)), 3, 3, rng.standard_normal((3, 3, 3, 3)))
    assert grad_check(L, (2, 8, 8, 3), seed=1) < 1e-4


@pytest.mark.parametrize("resample,shape", [(None, (2, 6, 6, 3)), (2, (2, 3, 3, 3)), (-2, (2, 6, 6, 3))])
def test_stitch_gradients(resample, shape):
    L = StitchingLayer(3, 4, 3, resample, init="random", seed=0)
    assert grad_check(L, shape, seed=2) < 1e-4


def test_stitch_identity_init_and_resampling(rng):
    f = rng.standard_normal((2, 4, 4, 3))
    np.testing.assert_allclose(StitchingLayer(3, 3).forward(f), f)
    assert StitchingLayer(3, 5, 1, 2).forward(f).shape == (2, 8, 8, 5)
    assert StitchingLayer(3, 5, 1, -2).forward(f).shape == (2, 2, 2, 5)
    with pytest.raises(ValueError):
        StitchingLayer(3, 3, 2)


def test_regression_recovers_known_layer(rng):
    g = parse_transform("rot:30", (16, 16))
    t = build_permutation_table(GEO, g, "round", (8, 8))
    truth = TransformationLayer(t, 2, 3, rng.standard_normal((3, 3, 2, 2)), rng.standard_normal(2))
    F = rng.standard_normal((40, 8, 8, 2))
    fitted = fit_translayer_regression(TransformationLayer(t, 2, 3), F, truth.forward(F), lam=0.0)
    np.testing.assert_allclose(fitted.filters, truth.filters, atol=1e-8)
    np.testing.assert_allclose(fitted.bias, truth.bias, atol=1e-8)


@pytest.mark.parametrize("kind", ["translayer", "stitch"])
def test_layer_save_load(tmp_path, rng, kind):
    if kind == "translayer":
        g = parse_transform("rot:30", (16, 16))
        L = TransformationLayer(build_permutation_table(GEO, g, "bilinear", (8, 8)), 3, 3,
                                rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3), g, GEO)
        f = rng.standard_normal((2, 8, 8, 3))
    else:
        L = StitchingLayer(3, 4, 3, None, "random", 0)
        f = rng.standard_normal((2, 6, 6, 3))
    save_layer(L, tmp_path / "l")
    np.testing.assert_allclose(load_layer(tmp_path / "l").forward(f), L.forward(f))


def test_transformation_layer_improves_over_uncompensated(small_net):
    net, tr, te = small_net
    g = parse_transform("vflip", (32, 32))
    split = net.probe(2)
    layer, hist = train_transformation_layer(split, g, tr, TrainConfig(lr=3e-4, epochs=1, weight_decay=0.0),
                                             init="regression", val=te, eval_every=300)
    unc = compensated_error(split, None, g, te)
    comp = compensated_error(split, layer, g, te)
    assert comp < unc
    assert len(hist["val_error"]) == len(hist["samples"]) >= 2


def test_identity_stitch_between_same_net_is_lossless(small_net):
    net, _, te = small_net
    stitch, _ = learn_stitch(net.probe(1), net.probe(1), te, TrainConfig(epochs=0))
    assert evaluate_franken(net.probe(1), stitch, net.probe(1), te) == pytest.approx(net.error(te.images, te.labels))


def test_bad_init_rejected(small_net):
    net, tr, _ = small_net
    with pytest.raises(ValueError):
        train_transformation_layer(net.probe(1), parse_transform("vflip", (32, 32)), tr, init="bogus")
