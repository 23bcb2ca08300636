import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference, relative_error
from lkis._utils import DivergenceError, ShapeError, TimeSeries
from lkis.dmd import FIXED_POINT_DICTIONARY, hankel_model
from lkis.dynamics import SystemKind, SystemSpec, simulate, simulate_episodes
from lkis.model import (
    Embedder,
    Hyperparameters,
    LkisModel,
    TrainConfig,
    build_pairs,
    delay_windows,
    embed,
    load_model,
    loss_and_grads,
    model_from_dict,
    model_to_dict,
    observables,
    rec_loss,
    rss_loss,
    rss_loss_grad,
    save_model,
    total_loss,
    train,
)
from lkis.neuralnet import NetMode


def _spiral(length=200, rho=0.95, theta=0.3) -> TimeSeries:
    M = rho * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    spec = SystemSpec(SystemKind.LINEAR_MAP, matrix=M)
    return simulate(spec, [1.0, 0.0], length).to_series()


def _fixed_point_dictionary_values(n_pairs: int, seed: int = 0) -> list[np.ndarray]:
    spec = SystemSpec.default(SystemKind.FIXED_POINT_MAP)
    trajs = simulate_episodes(spec, n_pairs // 10, 11, seed=seed)
    return [FIXED_POINT_DICTIONARY(t.states) for t in trajs]


class TestEmbed:
    def test_identity_k1(self):
        e = Embedder(W_phi=np.eye(2), k=1, r=2)
        np.testing.assert_array_equal(embed(e, [[3.0, 4.0]]), [3.0, 4.0])

    def test_delay_coordinates(self):
        e = Embedder(W_phi=np.eye(2), k=2, r=1)
        np.testing.assert_array_equal(embed(e, [5.0, 4.0]), [5.0, 4.0])

    def test_dense_product(self, rng):
        W = rng.normal(size=(3, 6))
        window = rng.normal(size=(3, 2))
        np.testing.assert_allclose(embed(Embedder(W, k=3, r=2), window), W @ window.ravel())

    def test_wrong_window_length(self):
        with pytest.raises(ShapeError):
            embed(Embedder(W_phi=np.eye(2), k=2, r=1), [1.0, 2.0, 3.0])

    def test_inconsistent_w_phi(self):
        with pytest.raises(ShapeError):
            Embedder(W_phi=np.eye(3), k=2, r=1)


def test_delay_windows_newest_first():
    values = np.arange(5.0)[:, None]
    np.testing.assert_array_equal(delay_windows(values, 3), [[2, 1, 0], [3, 2, 1], [4, 3, 2]])


def test_delay_windows_multivariate():
    values = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    np.testing.assert_array_equal(delay_windows(values, 2), [[2, 20, 1, 10], [3, 30, 2, 20]])


class TestBuildPairs:
    def test_counting(self):
        pairs = build_pairs(TimeSeries(np.arange(5.0)), k=2)
        assert len(pairs) == 3
        np.testing.assert_array_equal(pairs.t, [1, 2, 3])
        np.testing.assert_array_equal(pairs.windows0[0], [1.0, 0.0])
        np.testing.assert_array_equal(pairs.windows1[0], [2.0, 1.0])
        np.testing.assert_array_equal(pairs.targets0[:, 0], [1.0, 2.0, 3.0])

    def test_boundary_length(self):
        assert len(build_pairs(TimeSeries(np.arange(4.0)), k=3)) == 1

    def test_too_short(self):
        with pytest.raises(ShapeError, match="at least 4"):
            build_pairs(TimeSeries(np.arange(3.0)), k=3)

    def test_episodes_never_straddle(self):
        episodes = [TimeSeries(np.arange(n, dtype=float) + 100 * e) for e, n in enumerate([5, 7, 4])]
        pairs = build_pairs(episodes, k=2)
        assert len(pairs) == (5 - 2) + (7 - 2) + (4 - 2)
        np.testing.assert_array_equal(np.bincount(pairs.episode), [3, 5, 2])
        # consecutive samples within each episode differ by exactly 1
        np.testing.assert_array_equal(pairs.windows1[:, 0] - pairs.windows0[:, 0], np.ones(len(pairs)))

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(ShapeError):
            build_pairs([TimeSeries(np.zeros((4, 1))), TimeSeries(np.zeros((4, 2)))], k=1)


class TestRssLoss:
    def test_exact_linear_relation(self, rng):
        Y0 = rng.normal(size=(3, 20))
        assert rss_loss(Y0, rng.normal(size=(3, 3)) @ Y0) < 1e-10

    def test_hand_example(self):
        Y0, Y1 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
        assert rss_loss(Y0, Y1) == pytest.approx(1.0)
        _, dY1 = rss_loss_grad(Y0, Y1)
        np.testing.assert_allclose(dY1, [[0.0, 2.0]], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rss_loss(np.ones((2, 3)), np.ones((2, 4)))

    def test_dictionary_on_fixed_point_map_is_invariant(self):
        values = _fixed_point_dictionary_values(1000)
        Y0 = np.hstack([v[:, :-1] for v in values])
        Y1 = np.hstack([v[:, 1:] for v in values])
        assert rss_loss(Y0, Y1) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.floats(0.1, 10.0))
    def test_scales_quadratically(self, seed, c):
        rng = np.random.default_rng(seed)
        Y0, Y1 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        assert rss_loss(c * Y0, c * Y1) == pytest.approx(c**2 * rss_loss(Y0, Y1), rel=1e-8, abs=1e-12)

    def test_gradient_zero_at_minimum(self, rng):
        Y0 = rng.normal(size=(3, 8))
        dY0, dY1 = rss_loss_grad(Y0, rng.normal(size=(3, 3)) @ Y0)
        assert np.abs(dY0).max() < 1e-10 and np.abs(dY1).max() < 1e-10

    @pytest.mark.parametrize("n,b", [(3, 8), (2, 5), (1, 4), (4, 9), (3, 30), (2, 2), (3, 3), (4, 2), (5, 3), (3, 1)])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradient_matches_finite_differences(self, n, b, seed):
        rng = np.random.default_rng(seed)
        Y0, Y1 = rng.normal(size=(n, b)), rng.normal(size=(n, b))
        dY0, dY1 = rss_loss_grad(Y0, Y1)
        num0 = finite_difference(lambda y: rss_loss(y, Y1), Y0.copy())
        num1 = finite_difference(lambda y: rss_loss(Y0, y), Y1.copy())
        if b > n:
            assert relative_error(dY0, num0) < 1e-4
            assert relative_error(dY1, num1) < 1e-4
        else:
            # Y0 has full column rank, so the fit is exact and the loss is flat zero
            np.testing.assert_allclose(dY0, num0, atol=1e-8)
            np.testing.assert_allclose(dY1, num1, atol=1e-8)

    def test_fixed_koopman_matches_projector_gradient(self, rng):
        Y0, Y1 = rng.normal(size=(3, 10)), rng.normal(size=(3, 10))
        A = Y1 @ np.linalg.pinv(Y0)
        for free, fixed in zip(rss_loss_grad(Y0, Y1), rss_loss_grad(Y0, Y1, A)):
            np.testing.assert_allclose(free, fixed, atol=1e-10)


def test_koopman_matrix_converges_with_more_data():
    lam, mu = 0.9, 0.5
    values = _fixed_point_dictionary_values(1000, seed=3)

    def koopman(m):
        blocks = values[: m // 10]
        Y0 = np.hstack([v[:, :-1] for v in blocks])
        Y1 = np.hstack([v[:, 1:] for v in blocks])
        return Y1 @ np.linalg.pinv(Y0)

    A50, A200, A1000 = koopman(50), koopman(200), koopman(1000)
    assert np.linalg.norm(A1000 - A200) <= np.linalg.norm(A200 - A50) + 1e-10
    expected = np.array([[lam, 0, 0], [0, mu, lam**2 - mu], [0, 0, lam**2]])
    np.testing.assert_allclose(A1000, expected, atol=1e-8)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(A1000).real), [mu, lam**2, lam], atol=1e-6)


class TestRecLoss:
    def test_identity_reconstruction_is_zero(self):
        model = hankel_model(1, 1)
        windows = np.arange(4.0)[:, None]
        assert rec_loss(model, windows, windows) == 0.0

    def test_single_pair(self):
        model = hankel_model(1, 1)
        assert rec_loss(model, [[1.0]], [[3.0]]) == pytest.approx(4.0)

    def test_per_row_oracle(self, rng):
        model = LkisModel.new(2, Hyperparameters(k=2, n=3), seed=1)
        windows, targets = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        expected = 0.0
        for w, y in zip(windows, targets):
            expected += rec_loss(model, w[None], y[None])
        assert rec_loss(model, windows, targets) == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self, rng):
        model = LkisModel.new(2, Hyperparameters(k=2, n=3), seed=1)
        with pytest.raises(ShapeError):
            rec_loss(model, rng.normal(size=(6, 4)), rng.normal(size=(6, 1)))


class TestTotalLoss:
    def _setup(self, alpha=1.0, l1=0.0):
        model = LkisModel.new(1, Hyperparameters(k=2, n=3, alpha=alpha, l1_phi=l1), seed=2)
        pairs = build_pairs(TimeSeries(np.sin(0.3 * np.arange(40))), k=2)
        return model, pairs

    def test_rss_only(self):
        model, pairs = self._setup(alpha=0.0)
        G0, G1 = observables(model, pairs.windows0), observables(model, pairs.windows1)
        assert total_loss(model, pairs).total == pytest.approx(rss_loss(G0.T, G1.T), rel=1e-12)

    def test_component_sum(self):
        model, pairs = self._setup(alpha=0.7, l1=0.05)
        loss = total_loss(model, pairs)
        G0, G1 = observables(model, pairs.windows0), observables(model, pairs.windows1)
        rec = rec_loss(model, pairs.windows0, pairs.targets0)
        l1 = np.abs(model.embedder.W_phi).sum()
        assert loss.rss == pytest.approx(rss_loss(G0.T, G1.T), rel=1e-12)
        assert loss.rec == pytest.approx(rec, rel=1e-12)
        assert loss.total == pytest.approx(loss.rss + 0.7 * rec + 0.05 * l1, rel=1e-12)

    def test_zero_rss_leaves_reconstruction(self):
        model, pairs = self._setup(alpha=1.0)
        few = pairs.take(slice(0, 3))
        loss = total_loss(model, few)
        assert loss.rss < 1e-20
        assert loss.total == pytest.approx(rec_loss(model, few.windows0, few.targets0), rel=1e-9)


def test_end_to_end_gradient(rng):
    model = LkisModel.new(1, Hyperparameters(k=2, p=2, n=3, alpha=0.5, l1_phi=0.01), seed=4)
    pairs = build_pairs(TimeSeries(np.sin(0.4 * np.arange(24)) + 0.1 * rng.normal(size=24)), k=2)
    _, grads = loss_and_grads(model, pairs, NetMode.TRAIN)
    params = model.params()
    for name, value in params.items():
        def f(_):
            model.set_params(params)
            return total_loss(model, pairs, NetMode.TRAIN).total

        numeric = finite_difference(f, value)
        assert relative_error(grads[name], numeric) < 1e-4, name


def test_stop_gradient_with_batch_koopman_matches(rng):
    model = LkisModel.new(1, Hyperparameters(k=3, n=4), seed=0)
    pairs = build_pairs(TimeSeries(rng.normal(size=60)), k=3)
    G = observables(model, np.concatenate([pairs.windows0, pairs.windows1]), NetMode.TRAIN)
    b = len(pairs)
    A = G[b:].T @ np.linalg.pinv(G[:b].T)
    model = LkisModel.new(1, Hyperparameters(k=3, n=4), seed=0)
    free_loss, free = loss_and_grads(model, pairs)
    model = LkisModel.new(1, Hyperparameters(k=3, n=4), seed=0)
    fixed_loss, fixed = loss_and_grads(model, pairs, koopman=A)
    assert fixed_loss.total == pytest.approx(free_loss.total, rel=1e-9)
    for name in free:
        np.testing.assert_allclose(fixed[name], free[name], rtol=1e-6, atol=1e-10)


def test_hyperparameter_defaults():
    hyper = Hyperparameters()
    assert (hyper.k, hyper.alpha, hyper.l1_phi, hyper.depth) == (8, 1.0, 0.0, 1)
    assert hyper.resolved_p(3) == 24
    with pytest.raises(ValueError):
        Hyperparameters(alpha=-1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


class TestTrain:
    def test_linear_spiral_reaches_invariant_subspace(self):
        hyper = Hyperparameters(k=1, n=2, alpha=0.0, depth=0)
        cfg = TrainConfig(batch_size=1000, max_epochs=20, optimizer="sgd", lr=1e-3)
        model, report = train(_spiral(), hyper, cfg)
        assert report.full_rss_curve()[-1] < 1e-6
        assert total_loss(model, build_pairs(_spiral(), 1)).rss < 1e-6

    def test_reproducible(self):
        hyper = Hyperparameters(k=2, n=3)
        cfg = TrainConfig(batch_size=50, max_epochs=3, seed=11)
        a_model, a = train(_spiral(), hyper, cfg)
        b_model, b = train(_spiral(), hyper, cfg)
        assert a.records == b.records
        for name, value in a_model.params().items():
            assert np.array_equal(value, b_model.params()[name])

    def test_records_per_epoch(self):
        cfg = TrainConfig(batch_size=50, max_epochs=4)
        _, report = train(_spiral(), Hyperparameters(k=2, n=3), cfg)
        # 198 pairs -> batches of 50, 50, 50, 48
        assert len(report.records) == 16
        assert [r.step for r in report.records] == list(range(16))
        assert len(report.epoch_records()) == 4
        assert all(np.isfinite(r.val_loss) for r in report.epoch_records())

    def test_explicit_validation_and_patience(self):
        series = _spiral(300)
        cfg = TrainConfig(batch_size=100, max_epochs=50, patience=1, lr=1e-2)
        _, report = train(series.slice(0, 200), Hyperparameters(k=2, n=3), cfg, validation=series.slice(200))
        assert report.best_epoch is not None
        assert report.epoch_records()[report.best_epoch].val_loss == min(r.val_loss for r in report.epoch_records())

    def test_stop_gradient_mode_runs(self):
        cfg = TrainConfig(batch_size=50, max_epochs=2, stop_gradient_koopman=True)
        model, report = train(_spiral(), Hyperparameters(k=2, n=3), cfg)
        assert len(report.epoch_records()) == 2

    def test_divergence_carries_report(self):
        series = TimeSeries(1e200 * np.sin(np.arange(50.0)))
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
            train(series, Hyperparameters(k=2, n=3), TrainConfig(batch_size=20, max_epochs=2))
        assert info.value.report is not None

    def test_too_little_data(self):
        with pytest.raises(ShapeError):
            train(TimeSeries(np.arange(3.0)), Hyperparameters(k=2, n=2), TrainConfig())


def test_model_round_trip(tmp_path):
    model, _ = train(_spiral(), Hyperparameters(k=2, n=3), TrainConfig(batch_size=50, max_epochs=1))
    save_model(model, tmp_path / "model.json")
    back = load_model(tmp_path / "model.json")
    for name, value in model.params().items():
        assert np.array_equal(value, back.params()[name])
    windows = delay_windows(_spiral().values, 2)
    np.testing.assert_array_equal(observables(back, windows), observables(model, windows))


def test_model_document_is_validated():
    doc = model_to_dict(LkisModel.new(1, Hyperparameters(k=2, n=3)))
    doc["W_phi"] = np.eye(3).tolist()
    with pytest.raises(ShapeError):
        model_from_dict(doc)


@pytest.mark.slow
def test_full_batch_rss_falls_under_minibatch_training():
    traj = simulate(SystemSpec.default("fitzhugh_nagumo", observed=(0,)), [1.0, 0.0], 2008, discard=200)
    series = traj.to_series()
    hyper = Hyperparameters(k=8, n=16)
    cfg = TrainConfig(batch_size=200, max_epochs=100, lr=1e-3)
    assert len(build_pairs(series, hyper.k)) == 2000
    _, report = train(series, hyper, cfg)
    curve = report.full_rss_curve()
    assert len(curve) == 100
    assert curve[-1] <= curve[0] / 10
    q = len(curve) // 4
    assert curve[-q:].mean() < curve[:q].mean()
