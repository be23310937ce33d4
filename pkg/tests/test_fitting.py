import numpy as np
import pytest

from articfeed.errors import DimensionMismatch, EmptyTrace, NonFiniteObjective
from articfeed.fitting import (
    MinimizeResult,
    SolverOptions,
    TrackerConfig,
    TrackerState,
    fit_palate,
    minimize,
    objective_gradient_check,
    track_frame,
)
from articfeed.models import (
    Correspondence,
    MultilinearModel,
    generate_synthetic_model,
    generate_synthetic_palate,
    multilinear_vertices,
    reconstruct_pca,
)


def quadratic_bowl(center):
    center = np.asarray(center, dtype=float)

    def fun(x):
        d = x - center
        return float(d @ d), 2.0 * d

    return fun


def rosenbrock(z):
    x, y = z
    f = (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2
    g = np.array([-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)])
    return f, g


class TestMinimize:
    def test_quadratic_bowl(self):
        res = minimize(quadratic_bowl([1.0, 2.0]), np.zeros(2))
        assert res.converged
        assert np.allclose(res.x, [1.0, 2.0], atol=1e-8)

    def test_rosenbrock(self):
        res = minimize(rosenbrock, np.array([-1.2, 1.0]), SolverOptions(max_iterations=500))
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)

    def test_never_increases(self):
        rng = np.random.default_rng(50)
        for _ in range(20):
            dim = rng.integers(2, 6)
            a = rng.standard_normal((dim, dim))
            h = a @ a.T + 0.1 * np.eye(dim)
            b = rng.standard_normal(dim)

            def fun(x, h=h, b=b):
                return float(0.5 * x @ h @ x + b @ x), h @ x + b

            x0 = rng.standard_normal(dim) * 5
            f0 = fun(x0)[0]
            res = minimize(fun, x0, SolverOptions(max_iterations=rng.integers(1, 40)))
            assert res.fun <= f0 + 1e-15

    def test_converged_flag_matches_gradient(self):
        res = minimize(quadratic_bowl([0.5, -0.5, 1.5]), np.ones(3), SolverOptions(max_iterations=2))
        assert res.converged == (res.gradient_norm <= 1e-8)

    def test_non_finite_at_start(self):
        def bad(x):
            return float("nan"), np.zeros_like(x)

        with pytest.raises(NonFiniteObjective):
            minimize(bad, np.zeros(2))

    def test_result_shape(self):
        res = minimize(quadratic_bowl([0.0]), np.array([3.0]))
        assert isinstance(res, MinimizeResult)
        assert res.iterations >= 1


@pytest.fixture(scope="module")
def tongue():
    return generate_synthetic_model(seed=11, n=2, m=3, grid=8)


@pytest.fixture(scope="module")
def corr(tongue):
    v = tongue.num_vertices
    return (
        Correspondence("tt", v // 5),
        Correspondence("tb", v // 2),
        Correspondence("td", (4 * v) // 5),
    )


def coil_targets(model, corr, x, y):
    verts = multilinear_vertices(model, x, y).reshape(-1, 3)
    return {c.coil_id: verts[c.vertex_index] for c in corr}


class TestGradientCheck:
    def test_random_points(self, tongue, corr):
        cfg = TrackerConfig(correspondences=corr)
        rng = np.random.default_rng(60)
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal(tongue.n)
            y = rng.standard_normal(tongue.m)
            coils = {c.coil_id: rng.standard_normal(3) * 10 for c in corr}
            err = objective_gradient_check(
                tongue, cfg, x, y, coils,
                x_prev=rng.standard_normal(tongue.n),
                y_prev=rng.standard_normal(tongue.m),
            )
            worst = max(worst, err)
        assert worst < 1e-5

    def test_zero_core_leaves_prior_and_temporal(self, tongue, corr):
        from articfeed.fitting import TongueObjective

        model = MultilinearModel(
            mean=tongue.mean,
            core=np.zeros_like(tongue.core),
            neutral_x=tongue.neutral_x,
            neutral_y=tongue.neutral_y,
            sigmas_x=tongue.sigmas_x,
            sigmas_y=tongue.sigmas_y,
            faces=tongue.faces,
        )
        rng = np.random.default_rng(61)
        x = rng.standard_normal(model.n)
        y = rng.standard_normal(model.m)
        xp = rng.standard_normal(model.n)
        yp = rng.standard_normal(model.m)
        obj = TongueObjective(
            model, [c.vertex_index for c in corr],
            [rng.standard_normal(3) for _ in corr],
            alpha_prior=0.3, beta_temporal=0.7, x_prev=xp, y_prev=yp,
        )
        _, g = obj.value_and_grad(obj.pack(x, y))
        gx_expect = 2 * 0.3 * (x - model.neutral_x) / model.sigmas_x**2 + 2 * 0.7 * (x - xp)
        gy_expect = 2 * 0.3 * (y - model.neutral_y) / model.sigmas_y**2 + 2 * 0.7 * (y - yp)
        assert np.allclose(g, np.concatenate([gx_expect, gy_expect]), atol=1e-12)

    def test_gradient_zero_at_quadratic_minimum(self):
        res = minimize(quadratic_bowl([2.0, -3.0]), np.zeros(2))
        assert res.gradient_norm < 1e-8


class TestFitPalate:
    def test_mean_trace_keeps_weights_at_zero(self):
        palate = generate_synthetic_palate(seed=21, n=3, grid=8)
        trace = palate.mean.reshape(-1, 3)
        res = fit_palate(palate, trace, prior_weight=1e-4)
        assert np.linalg.norm(res.x) <= 1e-6
        assert res.mean_residual <= 1e-9

    def test_generate_then_fit(self):
        palate = generate_synthetic_palate(seed=22, n=4, grid=10)
        x_true = np.zeros(4)
        x_true[0] = 0.5
        mesh = reconstruct_pca(palate, x_true)
        rng = np.random.default_rng(23)
        pts = []
        for _ in range(50):
            f = rng.integers(0, mesh.num_faces)
            w = rng.dirichlet(np.ones(3))
            pts.append(w @ mesh.vertices[mesh.faces[f]])
        res = fit_palate(palate, np.array(pts), prior_weight=1e-6, outer_iterations=60)
        assert res.mean_residual <= 1e-3

    def test_residual_history_non_increasing(self):
        palate = generate_synthetic_palate(seed=24, n=4, grid=10)
        rng = np.random.default_rng(25)
        mesh = reconstruct_pca(palate, 0.8 * rng.standard_normal(4))
        pts = []
        for _ in range(60):
            f = rng.integers(0, mesh.num_faces)
            w = rng.dirichlet(np.ones(3))
            pts.append(w @ mesh.vertices[mesh.faces[f]])
        res = fit_palate(palate, np.array(pts), prior_weight=1e-6, outer_iterations=60)
        hist = res.residual_history
        assert all(hist[i + 1] <= hist[i] + 1e-12 for i in range(len(hist) - 1))

    def test_empty_trace(self):
        palate = generate_synthetic_palate(seed=26, n=2, grid=6)
        with pytest.raises(EmptyTrace):
            fit_palate(palate, np.zeros((0, 3)))


def smooth_pose_track(model, frames, amplitude=0.6):
    t = np.arange(frames) / 100.0
    y = np.zeros((frames, model.m))
    for j in range(model.m):
        y[:, j] = amplitude * np.sin(2 * np.pi * (0.8 + 0.3 * j) * t + 0.5 * j)
    return y


def tracking_config(corr, **kw):
    defaults = dict(alpha_prior=1e-10, beta_temporal=1e-10, freeze_after=50)
    defaults.update(kw)
    return TrackerConfig(correspondences=corr, **defaults)


class TestTrackFrame:
    def test_neutral_coils_keep_neutral_weights(self, tongue, corr):
        cfg = TrackerConfig(correspondences=corr)
        state = TrackerState.initial(tongue)
        coils = coil_targets(tongue, corr, tongue.neutral_x, tongue.neutral_y)
        res = track_frame(state, tongue, cfg, coils)
        assert np.linalg.norm(res.state.x - tongue.neutral_x) <= 1e-6
        assert np.linalg.norm(res.state.y - tongue.neutral_y) <= 1e-6

    def test_generate_then_track(self, tongue, corr):
        cfg = tracking_config(corr)
        rng = np.random.default_rng(70)
        x_true = rng.standard_normal(tongue.n)
        ys = smooth_pose_track(tongue, 120)
        state = TrackerState.initial(tongue)
        residuals = []
        for k in range(len(ys)):
            coils = coil_targets(tongue, corr, x_true, ys[k])
            res = track_frame(state, tongue, cfg, coils)
            state = res.state
            residuals.append(res.residual)
        assert max(residuals) <= 1e-4

    def test_anatomy_frozen_bit_identical(self, tongue, corr):
        cfg = tracking_config(corr, freeze_after=20)
        rng = np.random.default_rng(71)
        x_true = rng.standard_normal(tongue.n)
        ys = smooth_pose_track(tongue, 40)
        state = TrackerState.initial(tongue)
        xs = []
        for k in range(len(ys)):
            res = track_frame(state, tongue, cfg, coil_targets(tongue, corr, x_true, ys[k]))
            state = res.state
            xs.append(state.x.copy())
        frozen = xs[20]
        for k in range(20, 40):
            assert np.array_equal(xs[k], frozen)
        assert state.frozen

    def test_temporal_limit_pins_pose(self, tongue, corr):
        cfg = TrackerConfig(correspondences=corr, alpha_prior=0.0, beta_temporal=1e12, freeze_after=10)
        rng = np.random.default_rng(72)
        x_true = rng.standard_normal(tongue.n)
        ys = smooth_pose_track(tongue, 30)
        state = TrackerState.initial(tongue)
        for k in range(len(ys)):
            prev_y = state.y.copy()
            res = track_frame(state, tongue, cfg, coil_targets(tongue, corr, x_true, ys[k]))
            state = res.state
            assert np.max(np.abs(state.y - prev_y)) <= 1e-4

    def test_no_visible_coils_flagged(self, tongue, corr):
        cfg = TrackerConfig(correspondences=corr)
        state = TrackerState.initial(tongue)
        res = track_frame(state, tongue, cfg, {})
        assert res.no_visible_coils
        assert np.array_equal(res.state.x, state.x)
        assert np.array_equal(res.state.y, state.y)
        assert res.state.frame_count == state.frame_count

    def test_missing_coil_dropped(self, tongue, corr):
        cfg = tracking_config(corr)
        rng = np.random.default_rng(73)
        x_true = rng.standard_normal(tongue.n)
        ys = smooth_pose_track(tongue, 10)
        state = TrackerState.initial(tongue)
        for k in range(len(ys)):
            coils = coil_targets(tongue, corr, x_true, ys[k])
            if k % 3 == 1:
                coils[corr[0].coil_id] = None
            res = track_frame(state, tongue, cfg, coils)
            state = res.state
            expected_visible = 2 if k % 3 == 1 else 3
            assert res.visible == expected_visible

    def test_dimension_mismatch(self, tongue, corr):
        cfg = TrackerConfig(correspondences=corr)
        state = TrackerState(x=np.zeros(tongue.n + 1), y=np.zeros(tongue.m))
        with pytest.raises(DimensionMismatch):
            track_frame(state, tongue, cfg, {})

    def test_solver_beats_grid_search(self, tongue, corr):
        # pose-only fit against an exhaustive grid over [-3, 3] per mode
        from articfeed.fitting import TongueObjective

        model = generate_synthetic_model(seed=31, n=1, m=2, grid=8)
        v = model.num_vertices
        corr2 = (Correspondence("tt", v // 4), Correspondence("td", (3 * v) // 4))
        rng = np.random.default_rng(74)
        x_fixed = np.array([1.0])
        y_true = np.array([1.2, -0.7])
        coils = coil_targets(model, corr2, x_fixed, y_true)
        obj = TongueObjective(
            model,
            [c.vertex_index for c in corr2],
            [coils[c.coil_id] for c in corr2],
            alpha_prior=1e-3,
            beta_temporal=1e-3,
            x_prev=x_fixed,
            y_prev=np.zeros(2),
            x_fixed=x_fixed,
        )
        res = minimize(obj, np.zeros(2), SolverOptions(max_iterations=200))
        grid = np.linspace(-3.0, 3.0, 21)
        best = min(obj.value_and_grad(np.array([a, b]))[0] for a in grid for b in grid)
        assert res.fun <= best + 1e-12
