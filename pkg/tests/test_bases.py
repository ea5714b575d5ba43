import math

import numpy as np
import pytest
from helpers import boundary_margin_deg, brute_softmax, fd_rel_error, nearest_site
from hypothesis import given
from hypothesis import strategies as st

from sphervor import bases
from sphervor.bases import NumericError, SgParams, ShParams, SvParams
from sphervor.sphere import fibonacci_sphere, normalize, random_dirs, rotation_matrix

KINDS = [("sh", "norm"), ("sg", "norm"), ("sb", "norm"), ("sv", "norm"), ("sv", "explicit")]


def test_sh_l0_constant(rng):
    m = ShParams(np.array([[2 * math.sqrt(math.pi)]]))
    np.testing.assert_allclose(m.evaluate(random_dirs(rng, 100)), 1.0, atol=1e-14)


def test_sh_orthonormal_l4():
    d = fibonacci_sphere(100_000)
    Y = bases.sh_basis(4, d)
    gram = Y.T @ Y * (4 * math.pi / len(d))
    assert np.max(np.abs(gram - np.eye(25))) < 1e-3


def test_sh_low_order_closed_forms(rng):
    d = random_dirs(rng, 50)
    Y = bases.sh_basis(1, d)
    c1 = math.sqrt(3 / (4 * math.pi))
    np.testing.assert_allclose(Y[:, bases.sh_index(1, -1)], c1 * d[:, 1], atol=1e-14)
    np.testing.assert_allclose(Y[:, bases.sh_index(1, 0)], c1 * d[:, 2], atol=1e-14)
    np.testing.assert_allclose(Y[:, bases.sh_index(1, 1)], c1 * d[:, 0], atol=1e-14)


def test_sh_grad_is_basis(rng):
    m = ShParams(rng.normal(size=(16, 3)))
    d = random_dirs(rng, 1)
    up = np.array([[0.3, -1.0, 2.0]])
    g = m.grad(d, up).reshape(16, 3)
    np.testing.assert_allclose(g, bases.sh_basis(3, d)[0][:, None] * up, atol=1e-14)


def test_sv_single_site_constant(rng):
    m = SvParams(normalize(rng.normal(size=(1, 3))), np.array([[0.7]]), np.array([2.0]), "explicit")
    np.testing.assert_allclose(m.evaluate(random_dirs(rng, 64)), 0.7, atol=1e-15)


def test_sv_two_sites_equidistant():
    m = SvParams(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([[0.0], [1.0]]), np.log([3.0, 3.0]), "explicit")
    np.testing.assert_allclose(m.evaluate(normalize(np.array([1.0, 1.0, 0.3]))).ravel(), [0.5], atol=1e-15)


def test_sg_peak_value():
    m = SgParams(np.array([[0, 0, 1.0]]), np.array([math.log(7.0)]), np.array([[0.4, 1.5]]))
    np.testing.assert_allclose(m.evaluate([0, 0, 1.0]).ravel(), [0.4, 1.5], atol=1e-15)


def test_sv_weights_examples():
    m = SvParams(np.eye(3), np.zeros((3, 1)), np.log(np.full(3, 5.0)), "explicit")
    w = bases.sv_weights(m, np.array([1.0, 0, 0]))
    np.testing.assert_allclose(w.ravel(), brute_softmax(np.array([5.0, 0, 0])), atol=1e-12)
    e5 = math.exp(5.0)
    np.testing.assert_allclose(w.ravel(), [e5 / (e5 + 2), 1 / (e5 + 2), 1 / (e5 + 2)], atol=1e-12)


def test_sv_weights_zero_tau_uniform(rng):
    m = SvParams(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), mode="explicit")
    np.testing.assert_allclose(m.weights(random_dirs(rng, 10), tau=0.0), 0.2, atol=1e-15)


def test_sv_hard_limit_nearest_site(rng):
    sites = normalize(rng.normal(size=(6, 3)))
    vals = rng.uniform(size=(6, 3))
    m = SvParams(sites, vals, np.full(6, math.log(1e6)), "explicit")
    d = random_dirs(rng, 10_000)
    keep = boundary_margin_deg(sites, d) >= 1.0
    k = nearest_site(sites, d[keep])
    w = m.weights(d[keep])
    assert np.max(np.abs(w - np.eye(6)[k])) < 1e-6
    np.testing.assert_allclose(m.evaluate(d[keep]), vals[k], atol=1e-6)


def test_sv_smooth_limit_mean(rng):
    vals = rng.uniform(size=(7, 3))
    m = SvParams(rng.normal(size=(7, 3)), vals, np.full(7, math.log(1e-9)), "explicit")
    np.testing.assert_allclose(m.evaluate(random_dirs(rng, 200)), np.tile(vals.mean(0), (200, 1)), atol=1e-6)


@pytest.mark.parametrize("mode", ["explicit", "norm"])
def test_sv_partition_of_unity(rng, mode):
    m = bases.random_model("sv", 16, 3, rng, mode)
    w = m.weights(random_dirs(rng, 10_000))
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-7


def test_sv_large_tau_stable(rng):
    m = SvParams(fibonacci_sphere(64), rng.uniform(size=(64, 3)), np.full(64, math.log(1500.0)), "explicit")
    assert np.all(np.isfinite(m.evaluate(random_dirs(rng, 1000))))


def test_sv_k1_gradients(rng):
    m = SvParams(np.array([[0.2, 0.5, 0.9]]), np.array([[0.7, 0.1]]), np.array([0.3]), "explicit")
    up = np.array([[1.5, -2.0]])
    g = m.grad(random_dirs(rng, 1), up)
    rows = g.reshape(1, -1)
    np.testing.assert_allclose(rows[0, :4], 0.0, atol=1e-15)
    np.testing.assert_allclose(rows[0, 4:], up[0])


def test_sv_linear_in_values(rng):
    m = bases.random_model("sv", 9, 3, rng, "explicit")
    d = random_dirs(rng, 100)
    m2 = SvParams(m.sites, 2.5 * m.values, m.log_tau, "explicit")
    np.testing.assert_allclose(m2.evaluate(d), 2.5 * m.evaluate(d), atol=1e-12)
    np.testing.assert_array_equal(m2.weights(d), m.weights(d))


def test_norm_mode_tau_is_norm(rng):
    s = rng.normal(size=(4, 3))
    m = SvParams(s, np.zeros((4, 1)), mode="norm")
    np.testing.assert_array_equal(m.tau, np.linalg.norm(s, axis=1))


@pytest.mark.parametrize("kind", ["sg", "sb", "sv"])
def test_rotation_equivariance(rng, kind):
    m = bases.random_model(kind, 8, 3, rng)
    R = rotation_matrix(normalize(rng.normal(size=3)), 1.1)
    d = random_dirs(rng, 200)
    np.testing.assert_allclose(bases.rotate_model(m, R).evaluate(d @ R.T), m.evaluate(d), atol=1e-9)


@pytest.mark.parametrize("kind,mode", KINDS)
def test_gradients_match_finite_differences(rng, kind, mode):
    worst = 0.0
    for _ in range(10):
        size = int(rng.integers(0, 5)) if kind == "sh" else int(rng.integers(1, 17))
        m = bases.random_model(kind, size, 3, rng, mode)
        d = random_dirs(rng, 1)
        worst = max(worst, fd_rel_error(m, d, rng.normal(size=(1, 3))))
    assert worst < 1e-4


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_sv_weights_sum_to_one_property(k, seed):
    r = np.random.default_rng(seed)
    m = bases.random_model("sv", k, 2, r, "explicit")
    w = m.weights(random_dirs(r, 32))
    assert np.max(np.abs(w.sum(1) - 1)) < 1e-7


def test_param_counts(rng):
    assert bases.param_count(bases.preset_sv8()) == 48
    assert bases.param_count(ShParams.zeros(3, 3)) == 48
    assert bases.param_count(bases.random_model("sg", 8, 3, rng)) == 56


def test_preset_sv8_layout():
    m = bases.preset_sv8()
    assert m.mode == "norm" and m.size == 8 and m.channels == 3


def test_nonfinite_parameter_reports_index(rng):
    m = bases.random_model("sg", 3, 3, rng)
    v = m.vector()
    v[5] = np.nan
    with pytest.raises(NumericError) as e:
        bases.evaluate(m.with_vector(v), random_dirs(rng, 2))
    assert e.value.index == 5


@pytest.mark.parametrize("kind,mode", KINDS)
def test_model_file_roundtrip(tmp_path, rng, kind, mode):
    m = bases.random_model(kind, 3 if kind == "sh" else 5, 3, rng, mode)
    p = tmp_path / "m.txt"
    bases.save_model(p, m)
    text = p.read_text().splitlines()
    assert text[0] == "SVMODEL 1" and text[1] == f"kind {kind}" and text[2] == "channels 3"
    back = bases.load_model(p)
    np.testing.assert_array_equal(back.vector(), m.vector())
    assert type(back) is type(m)


def test_sb_clamped_at_lobe_axis():
    m = bases.SbParams(np.array([[0, 0, 1.0]]), bases.softplus_inv(np.array([0.5])), bases.softplus_inv(np.array([0.5])), np.ones((1, 1)))
    out = m.evaluate(np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert np.all(np.isfinite(out))
