import math

import numpy as np
import pytest

from sphervor import bases, targets
from sphervor.bases import ShParams, SvParams
from sphervor.fitter import (
    PSNR_SENTINEL,
    DivergedError,
    FitConfig,
    ModelSpec,
    SampleSet,
    dense_max,
    fit,
    gibbs_demo,
    mse,
    psnr,
    restart_experiment,
    restart_seeds,
)
from sphervor.sphere import fibonacci_sphere, random_dirs


def test_psnr_examples(rng):
    a = rng.uniform(size=(10, 3))
    assert psnr(a, a) == PSNR_SENTINEL
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)
    b = rng.uniform(size=(10, 3))
    assert psnr(a, b, peak=2.0) == pytest.approx(10 * math.log10(4.0 / np.mean((a - b) ** 2)))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), peak=0.0)


def test_sampleset_validation():
    with pytest.raises(ValueError):
        SampleSet(np.array([[0, 0, 2.0]]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        SampleSet(np.array([[0, 0, 1.0]]), np.array([[np.inf]]))
    with pytest.raises(ValueError):
        SampleSet(np.zeros((0, 3)), np.zeros((0, 1)))


def test_fit_constant_single_site():
    data = SampleSet.from_builtin("const0.3", 512)
    m = SvParams(np.array([[0.1, 0.2, 0.9]]), np.full((1, 3), -0.4), np.zeros(1), "explicit")
    rep = fit(m, data, FitConfig(iterations=2000, step_size=1e-2))
    np.testing.assert_allclose(rep.model.values, 0.3, atol=1e-6)
    assert rep.final_psnr > 100


def test_fit_sh_recovers_coefficients(rng):
    truth = ShParams(rng.normal(0, 0.3, (16, 3)))
    data = SampleSet.from_function(truth.evaluate, 10_000)
    rep = fit(ShParams.zeros(3, 3), data, FitConfig(iterations=3000, step_size=5e-3))
    assert np.max(np.abs(rep.model.coeffs - truth.coeffs)) < 1e-4


def test_fit_sh_matches_least_squares():
    data = SampleSet.from_builtin("cells4", 2000)
    Y = bases.sh_basis(2, data.dirs)
    ls = np.linalg.lstsq(Y, data.values, rcond=None)[0]
    rep = fit(ShParams.zeros(2, 3), data, FitConfig(iterations=3000, step_size=5e-3))
    assert np.max(np.abs(rep.model.coeffs - ls)) <= 1e-3 * np.max(np.abs(ls))


def test_linear_fit_loss_monotone():
    data = SampleSet.from_builtin("shmixL2", 2000)
    rep = fit(ShParams.zeros(2, 3), data, FitConfig(iterations=600, step_size=1e-3))
    steps = np.diff(rep.loss_trace[10:])
    assert np.all(steps <= 1e-9)


def test_fit_sv_two_cells_regression_anchor():
    data = SampleSet.from_builtin("cells2", 4096)
    m = bases.random_model("sv", 8, 3, np.random.default_rng(0), "explicit")
    rep = fit(m, data, FitConfig(iterations=2000, step_size=1e-2))
    assert rep.final_psnr > 40.0


def test_fit_trace_and_determinism(rng):
    data = SampleSet.from_builtin("smoothsv", 300)
    m = bases.random_model("sg", 4, 3, np.random.default_rng(1))
    cfg = FitConfig(iterations=50, step_size=1e-2)
    a = fit(m, data, cfg)
    b = fit(m, data, cfg)
    assert len(a.loss_trace) == 51
    assert a.final_loss == a.loss_trace[-1]
    np.testing.assert_array_equal(a.loss_trace, b.loss_trace)
    np.testing.assert_array_equal(a.model.vector(), b.model.vector())


def test_fit_zero_iterations_returns_input():
    data = SampleSet.from_builtin("smoothsv", 100)
    m = bases.preset_sv8()
    rep = fit(m, data, FitConfig(iterations=0))
    assert rep.model is m and len(rep.loss_trace) == 1


def test_fit_does_not_mutate_samples():
    data = SampleSet.from_builtin("cells2", 200)
    before = (data.dirs.copy(), data.values.copy())
    fit(bases.preset_sv8(), data, FitConfig(iterations=20))
    np.testing.assert_array_equal(data.dirs, before[0])
    np.testing.assert_array_equal(data.values, before[1])
    assert not data.values.flags.writeable


def test_fit_channel_mismatch():
    data = SampleSet.from_builtin("cells2", 50)
    with pytest.raises(ValueError):
        fit(ShParams.zeros(1, 1), data, FitConfig(iterations=1))


def test_fit_divergence_carries_last_iterate():
    data = SampleSet.from_builtin("const0.5", 64)
    with pytest.raises(DivergedError) as e:
        fit(ShParams.zeros(1, 3), data, FitConfig(iterations=5, step_size=1e200))
    assert e.value.iteration == 1
    np.testing.assert_array_equal(e.value.last_model.coeffs, 0.0)
    assert len(e.value.loss_trace) == 1


def test_restart_single_equals_fit():
    data = SampleSet.from_builtin("cells2", 256)
    spec = ModelSpec("sv", 4, 3)
    cfg = FitConfig(iterations=30, seed=5)
    summ = restart_experiment(spec, data, cfg, 1)
    rep = fit(spec.random(np.random.default_rng(restart_seeds(5, 1)[0])), data, cfg)
    assert summ.psnrs[0] == rep.final_psnr
    assert summ.median == rep.final_psnr


def test_restart_deterministic_and_csv(tmp_path):
    data = SampleSet.from_builtin("cells2", 128)
    cfg = FitConfig(iterations=20, seed=3)
    a = restart_experiment(ModelSpec("sg", 3, 3), data, cfg, 4)
    b = restart_experiment(ModelSpec("sg", 3, 3), data, cfg, 4)
    np.testing.assert_array_equal(a.psnrs, b.psnrs)
    assert a.seeds == b.seeds and len(set(a.seeds)) == 4
    a.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "restart,seed,final_psnr,final_loss,wall_ms" and len(lines) == 5


def test_restart_parallel_matches_serial():
    data = SampleSet.from_builtin("cells2", 128)
    cfg = FitConfig(iterations=15, seed=9)
    a = restart_experiment(ModelSpec("sv", 3, 3), data, cfg, 3, threads=1)
    b = restart_experiment(ModelSpec("sv", 3, 3), data, cfg, 3, threads=2)
    np.testing.assert_allclose(a.psnrs, b.psnrs, atol=1e-6)


def test_restart_records_divergence():
    data = SampleSet.from_builtin("const0.5", 64)
    summ = restart_experiment(ModelSpec("sh", 1, 3), data, FitConfig(iterations=5, step_size=1e200), 3)
    assert summ.restarts == 3 and len(summ.failures) == 3
    for f in summ.failures:
        assert summ.psnrs[f["restart"]] == -math.inf


def test_budget_specs():
    assert ModelSpec.for_budget("sv", 48).size == 8
    assert ModelSpec.for_budget("sh", 48).size == 3
    assert ModelSpec.for_budget("sg", 48).param_count <= 48
    assert ModelSpec.for_budget("sb", 48).param_count <= 48


def test_gibbs_smooth_target_small_overshoot():
    data = SampleSet.from_function(targets.smooth_sv().evaluate, 4000)
    rep, over = gibbs_demo(data, 8, FitConfig(iterations=1500, step_size=2e-2), grid=50_000)
    assert over < 0.02


def test_gibbs_constant_target():
    data = SampleSet.from_builtin("const0.4", 500)
    _, over = gibbs_demo(data, 4, FitConfig(iterations=1500, step_size=2e-2), grid=20_000)
    assert over <= 1e-4


def test_gibbs_rejects_unbounded_target():
    data = SampleSet.from_builtin("const1.5", 10)
    with pytest.raises(ValueError):
        gibbs_demo(data, 2, FitConfig(iterations=1))


def test_dense_max_chunking(rng):
    m = bases.random_model("sg", 3, 3, rng)
    d = fibonacci_sphere(5000)
    assert dense_max(m, 5000, chunk=777) == pytest.approx(float(m.evaluate(d).max()))


def test_mse_basic():
    assert mse(np.ones(4), np.zeros(4)) == 1.0
