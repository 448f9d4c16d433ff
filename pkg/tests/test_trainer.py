import numpy as np
import pytest

from optmrf.cli import gradcheck_instance
from optmrf.imaging import add_gaussian_noise, synthetic_image
from optmrf.inner import InnerSolveConfig, minimize_energy
from optmrf.model import FoEModel, build_dct_basis
from optmrf.trainer import (TRAIN_LAMBDA, TrainConfig, TrainingError, TrainingSample,
                            dataset_gradients, evaluate_loss, finite_difference_gradients,
                            implicit_gradients, loss, projected_lbfgs, relative_error,
                            sample_gradients, train)

CFG = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-10, max_iters=20000))


def random_samples(n, size=8, seed=0):
    img = synthetic_image(48, seed)
    out = []
    for k in range(n):
        g = img[4 * k:4 * k + size, 3 * k:3 * k + size]
        out.append(TrainingSample(add_gaussian_noise(g, 25.0, seed, stream=k), g))
    return out


def small_model(seed=0, n_filters=2):
    rng = np.random.default_rng(seed)
    return FoEModel(build_dct_basis(3), 0.3 * rng.standard_normal((n_filters, 8)),
                    rng.uniform(5, 20, n_filters))


def assert_packs_equal(a, b, factor=1.0, tol=0.0):
    np.testing.assert_allclose(a.d_alpha, factor * b.d_alpha, rtol=tol, atol=0)
    np.testing.assert_allclose(a.d_beta, factor * b.d_beta, rtol=tol, atol=0)
    assert a.loss == pytest.approx(factor * b.loss, rel=tol, abs=0)


# -- loss ---------------------------------------------------------------------------

def test_loss_examples():
    g = np.random.default_rng(0).uniform(0, 255, (5, 6))
    assert loss(g, g) == 0.0
    assert loss(np.ones((5, 6)), np.zeros((5, 6))) == 15.0
    x = g + np.random.default_rng(1).standard_normal((5, 6))
    expected = 0.0
    for i in range(5):
        for j in range(6):
            expected += 0.5 * (x[i, j] - g[i, j]) ** 2
    assert loss(x, g) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        loss(g, g[:, :5])


def test_sample_shape_mismatch():
    with pytest.raises(ValueError):
        TrainingSample(np.zeros((4, 4)), np.zeros((4, 5)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(adjoint_tol=0)
    with pytest.raises(ValueError):
        TrainConfig(outer_max_iters=0)


# -- gradients ----------------------------------------------------------------------

def test_trivial_zero_gradients():
    model, sample = gradcheck_instance(identity=True)
    pack = sample_gradients(model, sample, CFG)
    assert pack.loss == 0.0
    assert not np.any(pack.d_alpha) and not np.any(pack.d_beta)
    np.testing.assert_array_equal(pack.x_stars[0], sample.g)


def test_gradient_shapes():
    model = small_model(n_filters=3)
    pack = sample_gradients(model, random_samples(1)[0], CFG)
    assert pack.d_alpha.shape == (3,) and pack.d_beta.shape == (3, 8)
    assert pack.flat.shape == (27,)


def test_zero_alpha_gradient_is_not_zero():
    # alpha = 0 is a boundary point, but d loss / d alpha is still informative
    model = small_model().replace(alpha=np.zeros(2))
    pack = sample_gradients(model, random_samples(1)[0], CFG)
    assert np.all(pack.d_alpha < 0)
    assert not np.any(pack.d_beta)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    model, sample = gradcheck_instance(seed=seed)
    tight = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-12, max_iters=50000))
    pack = dataset_gradients(model, [sample], CFG)
    fd = finite_difference_gradients(model, [sample], tight, eps=1e-4, order=4)
    assert relative_error(pack.flat, fd).max() <= 1e-4


def test_loose_inner_tolerance_degrades_gradients():
    model, sample = gradcheck_instance(seed=0)
    tight = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-12, max_iters=50000))
    loose = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-1))
    fd = finite_difference_gradients(model, [sample], tight, eps=1e-4, order=4)
    err_tight = relative_error(dataset_gradients(model, [sample], CFG).flat, fd).max()
    err_loose = relative_error(dataset_gradients(model, [sample], loose).flat, fd).max()
    assert err_loose >= 10 * err_tight


def test_sign_against_loss_decrease():
    model, sample = gradcheck_instance(seed=3)
    pack = sample_gradients(model, sample, CFG)
    step = 1e-3 / np.abs(pack.flat).max()
    moved = model.replace(alpha=np.maximum(model.alpha - step * pack.d_alpha, 0),
                          beta=model.beta - step * pack.d_beta)
    assert evaluate_loss(moved, [sample], CFG.inner) < pack.loss


def test_implicit_gradients_report_residual():
    model, sample = gradcheck_instance(seed=0)
    x, _ = minimize_energy(model, sample.f, TRAIN_LAMBDA, sample.f, CFG.inner)
    _, _, res = implicit_gradients(model, x, sample.g)
    assert res <= 1e-10


# -- sums over the dataset ---------------------------------------------------------

def test_single_sample_dataset_equals_sample():
    model = small_model()
    s = random_samples(1)[0]
    assert_packs_equal(dataset_gradients(model, [s], CFG), sample_gradients(model, s, CFG))


def test_duplicate_samples_double():
    model = small_model()
    s = random_samples(1)[0]
    assert_packs_equal(dataset_gradients(model, [s, s], CFG), sample_gradients(model, s, CFG), 2.0)


def test_three_samples_sum_by_hand():
    model = small_model()
    ss = random_samples(3)
    packs = [sample_gradients(model, s, CFG) for s in ss]
    total = dataset_gradients(model, ss, CFG)
    np.testing.assert_array_equal(total.d_alpha, packs[0].d_alpha + packs[1].d_alpha + packs[2].d_alpha)
    np.testing.assert_array_equal(total.d_beta, packs[0].d_beta + packs[1].d_beta + packs[2].d_beta)
    assert total.loss == packs[0].loss + packs[1].loss + packs[2].loss
    assert len(total.per_sample_reports) == 3


def test_union_linearity():
    model = small_model(1)
    ss = random_samples(5, seed=1)
    whole = dataset_gradients(model, ss, CFG)
    parts = dataset_gradients(model, ss[:2], CFG) + dataset_gradients(model, ss[2:], CFG)
    scale = np.abs(whole.flat).max()
    assert np.abs(whole.flat - parts.flat).max() <= 1e-12 * scale
    assert abs(whole.loss - parts.loss) <= 1e-12 * whole.loss


def test_threaded_sum_is_bit_identical():
    model = small_model()
    ss = random_samples(4)
    serial = dataset_gradients(model, ss, CFG)
    threaded = dataset_gradients(model, ss, TrainConfig(inner=CFG.inner, workers=3))
    np.testing.assert_array_equal(serial.flat, threaded.flat)
    assert serial.loss == threaded.loss


def test_empty_dataset():
    with pytest.raises(ValueError):
        dataset_gradients(small_model(), [], CFG)


def test_unconverged_majority_raises():
    cfg = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-12, max_iters=2))
    with pytest.raises(TrainingError):
        dataset_gradients(small_model(), random_samples(2), cfg)


# -- outer loop ---------------------------------------------------------------------

def test_projected_lbfgs_quadratic_with_bound():
    # minimize (x0 + 1)^2 + (x1 - 2)^2 with x0 >= 0
    def fun(x):
        return (x[0] + 1) ** 2 + (x[1] - 2) ** 2, np.array([2 * (x[0] + 1), 2 * (x[1] - 2)])

    seen = []
    x, f, reason = projected_lbfgs(fun, [3.0, 0.0], [True, False], rel_tol=1e-14,
                                   callback=lambda x, f, g: seen.append((x.copy(), f)))
    assert reason == "tolerance"
    np.testing.assert_allclose(x, [0.0, 2.0], atol=1e-7)
    assert all(v[0][0] >= 0 for v in seen)
    assert all(b[1] <= a[1] for a, b in zip(seen, seen[1:]))


def test_projected_lbfgs_rosenbrock():
    def fun(x):
        a, b = x
        return ((1 - a) ** 2 + 100 * (b - a * a) ** 2,
                np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)]))

    x, f, reason = projected_lbfgs(fun, [-1.2, 1.0], [False, False], max_iters=500, rel_tol=1e-16)
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-5)


def test_projected_lbfgs_rejects_failing_trials():
    calls = []

    def fun(x):
        calls.append(x[0])
        if x[0] < -0.5:
            raise ArithmeticError("outside domain")
        return (x[0] + 1) ** 2, np.array([2 * (x[0] + 1)])

    x, f, reason = projected_lbfgs(fun, [1.0], [False], max_iters=50, rel_tol=1e-12)
    assert x[0] >= -0.5
    assert reason in ("tolerance", "no_feasible_step")


def test_projected_lbfgs_restarts_from_gradient():
    # trials off the current steepest-descent ray fail, so every quasi-Newton
    # step is rejected and only the gradient retry makes progress
    scale = np.array([1.0, 30.0])
    state = {}

    def fun(x):
        if "x" in state:
            step = x - state["x"]
            ray = -state["g"]
            cos = float(step @ ray) / (np.linalg.norm(step) * np.linalg.norm(ray))
            if cos < 1 - 1e-9:
                raise ArithmeticError("off the gradient ray")
        return 0.5 * float(scale @ x ** 2), scale * x

    def accept(x, f, g):
        state["x"], state["g"] = x.copy(), g.copy()

    x, f, reason = projected_lbfgs(fun, [1.0, 1.0], [False, False], max_iters=40,
                                   rel_tol=1e-14, callback=accept)
    assert reason != "no_feasible_step"
    assert f < 1e-3


def test_train_trivial_returns_init():
    model, sample = gradcheck_instance(identity=True)
    out, hist = train(model, [sample], CFG)
    assert hist.evaluations == 1
    assert hist.reason == "tolerance"
    np.testing.assert_array_equal(out.alpha, model.alpha)
    np.testing.assert_array_equal(out.beta, model.beta)


def test_train_decreases_loss_and_keeps_alpha_feasible():
    samples = random_samples(2, size=10)
    init = FoEModel.initial(build_dct_basis(3), 2, alpha0=0.5)
    cfg = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-6), outer_max_iters=8)
    alphas = []
    model, hist = train(init, samples, cfg)
    assert np.all(model.alpha >= 0)
    assert hist.losses[-1] < hist.losses[0]
    assert all(b <= a for a, b in zip(hist.losses, hist.losses[1:]))
    assert len(hist.rows) == len(hist.losses)
    assert [r[0] for r in hist.rows] == list(range(len(hist.rows)))


def test_train_is_deterministic():
    samples = random_samples(2, size=10)
    init = FoEModel.initial(build_dct_basis(3), 2, alpha0=0.5)
    cfg = TrainConfig(inner=InnerSolveConfig(epsilon_l=1e-6), outer_max_iters=4)
    m1, h1 = train(init, samples, cfg)
    m2, h2 = train(init, samples, cfg)
    np.testing.assert_array_equal(m1.beta, m2.beta)
    assert h1.losses == h2.losses


def test_relative_error():
    np.testing.assert_allclose(relative_error([1.0, 0.0, 2.0], [1.1, 0.0, -2.0]),
                               [0.1 / 1.1, 0.0, 2.0])
