import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sphervor import probes
from sphervor.bases import SvParams, sigmoid
from sphervor.probes import ProbeField, ProbeStateError, interp_weights, knn, near_field, probe_grad, roughness_to_tau
from sphervor.sphere import CubeMap, fibonacci_sphere, random_dirs


def field_from(positions, sites, values, alpha_logit, knn_k, far=0.0):
    P = len(positions)
    return ProbeField(
        np.asarray(positions, float),
        np.asarray(alpha_logit, float),
        np.asarray(sites, float).reshape(P, -1, 3),
        np.asarray(values, float).reshape(P, np.asarray(sites).reshape(P, -1, 3).shape[1], -1),
        CubeMap.constant(2, np.full(3, far)),
        knn_k=knn_k,
    )


def random_field(rng, P=12, K=6, k=4):
    pf = probes.random_field(P, [-1, -1, -1], [1, 1, 1], K, rng, knn_k=k)
    pf.sites[:] = rng.normal(size=pf.sites.shape)
    pf.alpha_logit[:] = rng.normal(size=P)
    return pf


# -- knn ---------------------------------------------------------------------


def test_knn_exact_position(rng):
    pf = random_field(rng, k=1)
    idx, dist = knn(pf, pf.positions[5])
    assert idx[0, 0] == 5 and dist[0, 0] == 0.0


def test_knn_cube_corners_equidistant():
    h = 0.7
    corners = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    pf = field_from(corners, np.tile([0, 0, 1.0], (8, 1)), np.zeros((8, 3)), np.zeros(8), 8)
    idx, dist = knn(pf, [0.0, 0.0, 0.0])
    assert sorted(idx[0]) == list(range(8))
    np.testing.assert_allclose(dist[0], math.sqrt(3) * h, rtol=1e-15)
    assert list(idx[0]) == list(range(8))  # ties keep index order


def test_knn_matches_bruteforce(rng):
    pos = rng.uniform(-1, 1, (1024, 3))
    pf = field_from(pos, np.tile([0, 0, 1.0], (1024, 1)), np.zeros((1024, 3)), np.zeros(1024), 8)
    q = rng.uniform(-1, 1, (100, 3))
    idx, dist = knn(pf, q)
    for n in range(100):
        d = [math.dist(q[n], p) for p in pos]
        ref = sorted(range(1024), key=lambda i: (d[i], i))[:8]
        assert list(idx[n]) == ref
        np.testing.assert_allclose(dist[n], [d[i] for i in ref], rtol=1e-12)


def test_knn_too_few_probes(rng):
    pf = random_field(rng, P=3, k=3)
    with pytest.raises(ProbeStateError):
        knn(pf, [0, 0, 0], k=4)


def test_field_rejects_k_above_count(rng):
    with pytest.raises(ValueError):
        field_from(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 3)), np.zeros(2), 3)


# -- weights and tau -----------------------------------------------------------


def test_weights_equal_distances():
    np.testing.assert_allclose(interp_weights(np.full(8, 0.3)), 1 / 8)


def test_weights_coincident_probe_dominates():
    w = interp_weights(np.array([0.0, 1.0]), 1e-6)
    np.testing.assert_allclose(w, [0.999999, 1e-6], atol=2e-12)


def test_weights_match_oracle(rng):
    d = rng.uniform(0, 3, 7)
    inv = [1 / (x + 1e-6) for x in d]
    np.testing.assert_allclose(interp_weights(d), [v / sum(inv) for v in inv], rtol=1e-13)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 100)), st.randoms(use_true_random=False))
def test_weights_properties(d, r):
    w = interp_weights(d)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    perm = np.array(r.sample(range(len(d)), len(d)))
    np.testing.assert_allclose(interp_weights(d[perm]), w[perm], rtol=1e-12, atol=1e-15)


def test_tau_endpoints_exact():
    assert roughness_to_tau(0.0) == 1500.0
    assert roughness_to_tau(1.0) == 0.2
    assert roughness_to_tau(0.5) == pytest.approx(750.1, abs=1e-12)


def test_tau_clamps_with_warning():
    with pytest.warns(RuntimeWarning):
        assert roughness_to_tau(1.2) == 0.2
    with pytest.warns(RuntimeWarning):
        assert roughness_to_tau(-0.1) == 1500.0


@given(st.floats(0, 1), st.floats(0, 1))
def test_tau_affine_decreasing(a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ta, tb = roughness_to_tau(a), roughness_to_tau(b)
    if a < b:
        assert ta >= tb
    mid = roughness_to_tau(0.5 * (a + b))
    assert mid == pytest.approx(0.5 * (ta + tb), abs=1e-9)


# -- near field --------------------------------------------------------------


def test_single_probe_full_alpha(rng):
    sites = rng.normal(size=(5, 3))
    vals = rng.uniform(size=(5, 3))
    pf = field_from([[0.1, 0.2, 0.3]], sites, vals, [np.inf], 1)
    d = random_dirs(rng, 30)
    pts = rng.uniform(-1, 1, (30, 3))
    nf = near_field(pf, pts, d, 7.0)
    sv = SvParams(sites, vals, np.zeros(5), "explicit")
    np.testing.assert_allclose(nf.color, sv.evaluate(d, tau=7.0), atol=1e-14)
    np.testing.assert_array_equal(nf.alpha, 1.0)


def test_query_at_probe_position(rng):
    pf = random_field(rng, P=20, K=6, k=8)
    j = 7
    d = random_dirs(rng, 5)
    pts = np.tile(pf.positions[j], (5, 1))
    nf = near_field(pf, pts, d, 20.0)
    alone = pf.probe(j).sv.evaluate(d, tau=20.0)
    np.testing.assert_allclose(nf.color, alone, atol=1e-5)
    np.testing.assert_allclose(nf.alpha, sigmoid(pf.alpha_logit[j]), atol=1e-5)


def test_two_equidistant_constant_probes():
    pf = field_from([[-1, 0, 0], [1, 0, 0]], np.tile([0, 0, 1.0], (2, 1)), [[0.2] * 3, [0.6] * 3], [0.0, 0.0], 2)
    nf = near_field(pf, [[0, 0.5, 0]], [[0, 1.0, 0]], 3.0)
    np.testing.assert_allclose(nf.color, [[0.4] * 3], atol=1e-15)


def test_alpha_in_unit_interval(rng):
    pf = random_field(rng, P=16, k=5)
    pf.alpha_logit[:] = rng.normal(0, 20, 16)
    nf = near_field(pf, rng.uniform(-2, 2, (500, 3)), random_dirs(rng, 500), 10.0)
    assert np.all((nf.alpha >= 0) & (nf.alpha <= 1))


@given(arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_translation_invariance(shift):
    r = np.random.default_rng(4)
    pf = random_field(r, P=10, k=4)
    pts = r.uniform(-1, 1, (40, 3))
    d = random_dirs(r, 40)
    a = near_field(pf, pts, d, 5.0)
    moved = pf.copy()
    moved.positions += shift
    b = near_field(moved, pts + shift, d, 5.0)
    np.testing.assert_allclose(b.color, a.color, atol=1e-9)
    np.testing.assert_allclose(b.alpha, a.alpha, atol=1e-9)


def test_negative_tau_rejected(rng):
    with pytest.raises(ValueError):
        near_field(random_field(rng), [[0, 0, 0]], [[0, 0, 1.0]], -1.0)


# -- gradients ---------------------------------------------------------------


def test_single_probe_alpha_gradient():
    pf = field_from([[0, 0, 0]], np.eye(3), np.ones((3, 3)), [0.3], 1)
    pt, d = [[0.5, 0, 0]], [[0, 0, 1.0]]
    g = probe_grad(pf, pt, d, 4.0, [[1.0, 2.0, 3.0, 0.0]])
    assert g.alpha_logit[0] == 0.0
    g = probe_grad(pf, pt, d, 4.0, [[0.0, 0.0, 0.0, 1.0]])
    s = sigmoid(0.3)
    assert g.alpha_logit[0] == pytest.approx(s * (1 - s), rel=1e-14)


def _energy(pf, pts, d, tau, up):
    nf = near_field(pf, pts, d, tau)
    return float(np.sum(up[:, :3] * nf.color) + np.sum(up[:, 3] * nf.alpha))


def test_probe_grad_finite_differences(rng):
    pf = random_field(rng, P=10, K=5, k=4)
    n = 6
    pts = rng.uniform(-1, 1, (n, 3))
    d = random_dirs(rng, n)
    tau = rng.uniform(0.5, 6, n)
    up = rng.normal(size=(n, 4))
    g = probe_grad(pf, pts, d, tau, up)
    h = 1e-6
    for name in ("positions", "alpha_logit", "sites", "values"):
        a = getattr(pf, name)
        ga = getattr(g, name)
        for idx in np.ndindex(a.shape):
            fp, fm = pf.copy(), pf.copy()
            getattr(fp, name)[idx] += h
            getattr(fm, name)[idx] -= h
            num = (_energy(fp, pts, d, tau, up) - _energy(fm, pts, d, tau, up)) / (2 * h)
            assert abs(num - ga[idx]) <= 1e-4 * max(abs(num), abs(ga[idx]), 1e-3), (name, idx)


def test_distant_probe_gradients_vanish(rng):
    pos = np.array([[0, 0, 0], [0.1, 0, 0], [1e6, 0, 0]])
    pf = field_from(pos, rng.normal(size=(3, 4, 3)), rng.uniform(size=(3, 4, 3)), [0.0, 0.0, 0.0], 3)
    g = probe_grad(pf, [[0.05, 0.02, 0]], [[0, 0, 1.0]], 3.0, [[1.0, 1.0, 1.0, 1.0]])
    assert np.max(np.abs(g.values[2])) < 1e-6
    assert np.max(np.abs(g.sites[2])) < 1e-6
    assert abs(g.alpha_logit[2]) < 1e-6
    assert np.max(np.abs(g.positions[2])) < 1e-6
    assert np.max(np.abs(g.values[0])) > 1e-2


# -- files ---------------------------------------------------------------------


def test_field_file_roundtrip(tmp_path, rng):
    pf = random_field(rng, P=5, K=3, k=2)
    pf.far_field = CubeMap(rng.uniform(size=(6, 2, 2, 3)).astype(np.float32))
    path = tmp_path / "probes.txt"
    probes.save_field(path, pf)
    lines = path.read_text().splitlines()
    assert lines[0] == "PROBES 1" and lines[1] == "count 5" and lines[2] == "knn_k 2"
    back = probes.load_field(path)
    for name in ("positions", "alpha_logit", "sites", "values", "log_tau"):
        np.testing.assert_array_equal(getattr(back, name), getattr(pf, name))
    np.testing.assert_array_equal(back.far_field.data, pf.far_field.data)
    assert (back.knn_k, back.tau_min, back.tau_max, back.epsilon) == (2, pf.tau_min, pf.tau_max, pf.epsilon)


def test_bad_tau_bounds():
    with pytest.raises(ValueError):
        ProbeField(np.zeros((1, 3)), np.zeros(1), np.ones((1, 1, 3)), np.zeros((1, 1, 3)), CubeMap.constant(1, [0.0]), knn_k=1, tau_min=5, tau_max=1)
