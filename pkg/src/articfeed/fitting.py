"""Weight estimation: quasi-Newton solver and the model-fit objectives.

Per-frame tongue tracking minimizes

    E(x, y) = sum_c |v_corr(c)(x, y) - p_c|^2
            + alpha * (|x - nx|^2_sigma + |y - ny|^2_sigma)
            + beta  * (|x - x_prev|^2   + |y - y_prev|^2)

over anatomy weights x and pose weights y, warm-started from the previous
frame. After `freeze_after` fitted frames the anatomy weight is pinned to
the average of its history and only the pose is optimized from then on,
which also resolves the (a*x, y/a) scale ambiguity of the bilinear form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateModel,
    DimensionMismatch,
    EmptyTrace,
    NonFiniteObjective,
)
from .geometry import Mesh, closest_point_on_mesh
from .models import (
    Correspondence,
    MultilinearModel,
    PcaModel,
    multilinear_vertices,
    reconstruct_pca,
)

log = logging.getLogger(__name__)

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    memory: int = 8

    def __post_init__(self):
        if self.max_iterations <= 0 or self.gradient_tolerance <= 0 or self.memory <= 0:
            raise ValueError("solver options must be positive")


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    gradient_norm: float


def minimize(fun, x0, opts: SolverOptions | None = None) -> MinimizeResult:
    """Limited-memory quasi-Newton descent with backtracking line search.

    `fun(x)` must return `(value, gradient)`. Steps are only accepted when
    they satisfy sufficient decrease, so the objective never increases;
    `converged` is true exactly when the final gradient norm is at or below
    the tolerance. Raises NonFiniteObjective when the value or gradient is
    NaN/inf at the start point or at an accepted iterate.
    """
    opts = opts or SolverOptions()
    x = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective("objective not finite at start point")

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    gnorm = float(np.linalg.norm(g))
    iterations = 0

    for _ in range(opts.max_iterations):
        if gnorm <= opts.gradient_tolerance:
            break

        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        gd = float(np.dot(g, d))
        if gd >= 0.0:  # defensive reset; cannot happen with a fresh memory
            d = -g
            gd = -gnorm * gnorm

        t = 1.0 if s_hist else min(1.0, 1.0 / max(gnorm, 1.0))
        f_new = None
        for _bt in range(_MAX_BACKTRACKS):
            trial = x + t * d
            f_try, g_try = fun(trial)
            f_try = float(f_try)
            if np.isfinite(f_try) and f_try <= f + _ARMIJO_C1 * t * gd:
                f_new, g_new, x_new = f_try, g_try, trial
                break
            t *= 0.5
        if f_new is None:
            break  # no acceptable step along this direction

        g_new = np.asarray(g_new, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(g_new)):
            raise NonFiniteObjective("gradient not finite at accepted iterate")

        s = x_new - x
        yv = g_new - g
        sy = float(np.dot(s, yv))
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        iterations += 1

    return MinimizeResult(
        x=x, fun=f, iterations=iterations, converged=gnorm <= opts.gradient_tolerance, gradient_norm=gnorm
    )


def _two_loop(g, s_hist, y_hist, rho_hist) -> np.ndarray:
    """Implicit product H*g from the stored curvature pairs."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * y
    if s_hist:
        gamma = float(np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1]))
        q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q += (a - b) * s
    return q


class TongueObjective:
    """Value + gradient of the tracking energy on visible correspondences.

    The model is sliced down to the correspondence vertices once, so each
    evaluation touches only a (n, m, 3k) sub-core. `x_fixed` switches to
    pose-only mode, used after the anatomy is frozen.
    """

    def __init__(
        self,
        model: MultilinearModel,
        vertex_indices,
        targets,
        alpha_prior: float,
        beta_temporal: float,
        x_prev,
        y_prev,
        x_fixed=None,
    ):
        self.n = model.n
        self.m = model.m
        sel = np.asarray(
            [3 * int(v) + k for v in vertex_indices for k in range(3)], dtype=np.intp
        )
        self.mean_sel = model.mean[sel]
        self.core_sel = np.ascontiguousarray(model.core[:, :, sel])
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        if self.targets.size != sel.size:
            raise DimensionMismatch("targets do not match correspondence count")
        self.r0 = self.targets - self.mean_sel
        self.alpha = float(alpha_prior)
        self.beta = float(beta_temporal)
        self.nx = model.neutral_x
        self.ny = model.neutral_y
        self.inv_sx2 = 1.0 / model.sigmas_x**2
        self.inv_sy2 = 1.0 / model.sigmas_y**2
        self.x_prev = np.asarray(x_prev, dtype=np.float64).reshape(-1)
        self.y_prev = np.asarray(y_prev, dtype=np.float64).reshape(-1)
        self.x_fixed = None if x_fixed is None else np.asarray(x_fixed, dtype=np.float64).reshape(-1)
        if self.x_fixed is not None:
            # pose basis with anatomy baked in: rows are d v / d y_j
            self.pose_basis = np.tensordot(self.x_fixed, self.core_sel, axes=(0, 0))

    # -- joint (x, y) interface ------------------------------------------

    def pack(self, x, y) -> np.ndarray:
        return np.concatenate([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)])

    def unpack(self, z):
        return z[: self.n], z[self.n :]

    def value_and_grad(self, z):
        if self.x_fixed is not None:
            return self._value_and_grad_pose(z)
        x, y = self.unpack(np.asarray(z, dtype=np.float64))
        a = np.tensordot(y, self.core_sel, axes=(0, 1))  # (n, D): dv/dx_i rows
        r = x @ a - self.r0
        dx = x - self.nx
        dy = y - self.ny
        tx = x - self.x_prev
        ty = y - self.y_prev
        val = (
            float(r @ r)
            + self.alpha * (float(dx**2 @ self.inv_sx2) + float(dy**2 @ self.inv_sy2))
            + self.beta * (float(tx @ tx) + float(ty @ ty))
        )
        b = np.tensordot(x, self.core_sel, axes=(0, 0))  # (m, D): dv/dy_j rows
        gx = 2.0 * (a @ r) + 2.0 * self.alpha * dx * self.inv_sx2 + 2.0 * self.beta * tx
        gy = 2.0 * (b @ r) + 2.0 * self.alpha * dy * self.inv_sy2 + 2.0 * self.beta * ty
        return val, np.concatenate([gx, gy])

    def _value_and_grad_pose(self, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        r = y @ self.pose_basis - self.r0
        dy = y - self.ny
        ty = y - self.y_prev
        val = (
            float(r @ r)
            + self.alpha * float(dy**2 @ self.inv_sy2)
            + self.beta * float(ty @ ty)
        )
        gy = 2.0 * (self.pose_basis @ r) + 2.0 * self.alpha * dy * self.inv_sy2 + 2.0 * self.beta * ty
        return val, gy

    def __call__(self, z):
        return self.value_and_grad(z)


def objective_gradient_check(
    model: MultilinearModel,
    cfg: "TrackerConfig",
    x,
    y,
    coils,
    x_prev=None,
    y_prev=None,
    step: float = 1e-5,
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    The step is scaled by each weight's sigma; the error is normalized by
    the gradient's overall magnitude (floored at 1).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    x_prev = x if x_prev is None else np.asarray(x_prev, dtype=np.float64)
    y_prev = y if y_prev is None else np.asarray(y_prev, dtype=np.float64)
    vertex_indices, targets = _visible_targets(cfg.correspondences, coils)
    obj = TongueObjective(
        model, vertex_indices, targets, cfg.alpha_prior, cfg.beta_temporal, x_prev, y_prev
    )
    z = obj.pack(x, y)
    _, ga = obj.value_and_grad(z)
    sig = np.concatenate([model.sigmas_x, model.sigmas_y])
    gn = np.empty_like(ga)
    for i in range(z.size):
        h = step * sig[i]
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        gn[i] = (obj.value_and_grad(zp)[0] - obj.value_and_grad(zm)[0]) / (2.0 * h)
    scale = max(1.0, float(np.max(np.abs(ga))), float(np.max(np.abs(gn))))
    return float(np.max(np.abs(ga - gn)) / scale)


# -- palate fit ------------------------------------------------------------


@dataclass(frozen=True)
class PalateFitResult:
    x: np.ndarray
    mean_residual: float
    residual_history: tuple[float, ...]
    outer_iterations: int


def fit_palate(
    model: PcaModel,
    trace,
    prior_weight: float = 1e-4,
    outer_iterations: int = 10,
    solver: SolverOptions | None = None,
) -> PalateFitResult:
    """Fit palate weights to a point trace.

    Alternates (a) closest-point correspondences on the current
    reconstruction with (b) a quasi-Newton solve of the resulting
    regularized least-squares problem, until assignments stabilize.
    `mean_residual` is the average point-to-mesh distance at the result.
    """
    if model.n == 0:
        raise DegenerateModel("palate model has no modes")
    pts = np.asarray(trace, dtype=np.float64).reshape(-1, 3)
    if pts.size == 0:
        raise EmptyTrace("palate trace is empty")
    if len(pts) < 3 * model.n:
        log.warning("palate trace has %d points; %d recommended", len(pts), 3 * model.n)

    solver = solver or SolverOptions(max_iterations=200)
    basis3 = model.basis.reshape(-1, 3, model.n)  # (V, 3, n)
    mean3 = model.mean.reshape(-1, 3)
    x = np.zeros(model.n)
    inv_s2 = 1.0 / model.sigmas**2
    prev_assign = None
    history: list[float] = []

    def mean_distance(xx) -> float:
        mesh = reconstruct_pca(model, xx)
        return float(np.mean([closest_point_on_mesh(q, mesh).distance for q in pts]))

    for outer in range(outer_iterations):
        mesh = reconstruct_pca(model, x)
        hits = [closest_point_on_mesh(q, mesh) for q in pts]
        assign = tuple(h.face_index for h in hits)

        # s_k(x) = o_k + G_k x from the barycentric weights of each hit
        g_rows = np.empty((len(pts), 3, model.n))
        offs = np.empty((len(pts), 3))
        for k, h in enumerate(hits):
            vi = mesh.faces[h.face_index]
            w = h.barycentric
            g_rows[k] = np.einsum("r,rcn->cn", w, basis3[vi])
            offs[k] = np.einsum("r,rc->c", w, mean3[vi])

        def objective(xx, g_rows=g_rows, offs=offs):
            pred = offs + np.einsum("kcn,n->kc", g_rows, xx)
            r = pred - pts
            val = float(np.sum(r * r)) + prior_weight * float(xx**2 @ inv_s2)
            grad = 2.0 * np.einsum("kcn,kc->n", g_rows, r) + 2.0 * prior_weight * xx * inv_s2
            return val, grad

        res = minimize(objective, x, solver)
        x_new = res.x
        best = mean_distance(x_new)

        # the correspondence update contracts linearly; extrapolating along
        # the step and keeping only true-residual improvements collapses
        # the tail
        step = x_new - x
        if float(np.linalg.norm(step)) > 0:
            for factor in (2.0, 4.0, 8.0):
                cand = x + factor * step
                d = mean_distance(cand)
                if d < best:
                    best, x_new = d, cand
                else:
                    break

        # monotone acceptance: a step that worsens the true residual is
        # rejected, and there is nothing further to gain from iterating
        if history and best >= history[-1]:
            history.append(history[-1])
            break
        x = x_new
        history.append(best)

        # correspondences slide within faces even after the assignment
        # settles, so require the residual to stall as well
        stalled = len(history) >= 2 and history[-2] - history[-1] <= 1e-12 * (1.0 + history[-2])
        if prev_assign == assign and stalled:
            break
        prev_assign = assign

    return PalateFitResult(
        x=x,
        mean_residual=history[-1],
        residual_history=tuple(history),
        outer_iterations=len(history),
    )


# -- per-frame tongue tracking ----------------------------------------------


@dataclass(frozen=True)
class TrackerConfig:
    correspondences: tuple[Correspondence, ...]
    alpha_prior: float = 0.1
    beta_temporal: float = 1.0
    freeze_after: int = 200
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        corr = tuple(self.correspondences)
        if not corr:
            raise ValueError("correspondences must be non-empty")
        ids = [c.coil_id for c in corr]
        if len(set(ids)) != len(ids):
            raise ValueError("correspondence coil ids must be unique")
        if self.freeze_after < 1:
            raise ValueError("freeze_after must be >= 1")
        if self.alpha_prior < 0 or self.beta_temporal < 0:
            raise ValueError("regularization weights must be >= 0")
        object.__setattr__(self, "correspondences", corr)


@dataclass(frozen=True)
class TrackerState:
    """Evolving weights across frames; advanced by exactly one owner.

    After freezing, `pose_basis` caches the anatomy-contracted core so the
    full-mesh reconstruction is a single (m, 3V) product per frame.
    """

    x: np.ndarray
    y: np.ndarray
    frame_count: int = 0
    frozen: bool = False
    x_history: tuple = ()
    pose_basis: np.ndarray | None = None

    @classmethod
    def initial(cls, model: MultilinearModel) -> "TrackerState":
        return cls(x=model.neutral_x.copy(), y=model.neutral_y.copy())


@dataclass(frozen=True)
class TrackResult:
    state: TrackerState
    mesh: Mesh
    residual: float
    iterations: int
    gradient_norm: float
    visible: int
    no_visible_coils: bool = False
    bootstrapped: bool = False


def _visible_targets(correspondences, coils):
    vertex_indices = []
    targets = []
    for c in correspondences:
        p = coils.get(c.coil_id)
        if p is None:
            continue
        vertex_indices.append(c.vertex_index)
        targets.append(np.asarray(p, dtype=np.float64).reshape(3))
    return vertex_indices, targets


def _alternating_bootstrap(obj: TongueObjective, x0, y0, rounds: int = 5):
    """Closed-form coordinate sweeps for the bilinear data term.

    Each sweep solves the regularized least-squares problem exactly in one
    weight block while the other is held, which moves the iterate off the
    (0, 0) stationary point of the pure bilinear form.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    y = np.asarray(y0, dtype=np.float64).copy()
    for _ in range(rounds):
        b = np.tensordot(x, obj.core_sel, axes=(0, 0))  # (m, D)
        diag_y = obj.alpha * obj.inv_sy2 + obj.beta + 1e-12
        rhs_y = obj.r0 @ b.T + obj.alpha * obj.ny * obj.inv_sy2 + obj.beta * obj.y_prev
        y = np.linalg.solve(b @ b.T + np.diag(diag_y * np.ones(obj.m)), rhs_y)
        a = np.tensordot(y, obj.core_sel, axes=(0, 1))  # (n, D)
        diag_x = obj.alpha * obj.inv_sx2 + obj.beta + 1e-12
        rhs_x = obj.r0 @ a.T + obj.alpha * obj.nx * obj.inv_sx2 + obj.beta * obj.x_prev
        x = np.linalg.solve(a @ a.T + np.diag(diag_x * np.ones(obj.n)), rhs_x)
    return x, y


def track_frame(
    state: TrackerState,
    model: MultilinearModel,
    cfg: TrackerConfig,
    coils,
) -> TrackResult:
    """Advance the tracker by one frame of coil positions.

    `coils` maps coil id to a 3-point (mm) or None; missing coils drop out
    of the data term. With no visible coils the previous weights are kept
    and flagged. At `freeze_after` fitted frames the anatomy weight becomes
    the average of its history and stays fixed afterwards.
    """
    if state.x.size != model.n or state.y.size != model.m:
        raise DimensionMismatch("tracker state does not match model dimensions")

    vertex_indices, targets = _visible_targets(cfg.correspondences, coils)
    if not vertex_indices:
        mesh = Mesh(multilinear_vertices(model, state.x, state.y).reshape(-1, 3), model.faces)
        return TrackResult(
            state=state,
            mesh=mesh,
            residual=float("nan"),
            iterations=0,
            gradient_norm=float("nan"),
            visible=0,
            no_visible_coils=True,
        )

    if not state.frozen and state.frame_count == cfg.freeze_after:
        x_frozen = np.mean(np.asarray(state.x_history), axis=0)
        basis = np.tensordot(x_frozen, model.core, axes=(0, 0))
        state = replace(state, x=x_frozen, frozen=True, pose_basis=basis)

    bootstrapped = False
    if state.frozen:
        obj = TongueObjective(
            model,
            vertex_indices,
            targets,
            cfg.alpha_prior,
            cfg.beta_temporal,
            state.x,
            state.y,
            x_fixed=state.x,
        )
        res = minimize(obj, state.y, cfg.solver)
        x_new, y_new = state.x, res.x
    else:
        obj = TongueObjective(
            model, vertex_indices, targets, cfg.alpha_prior, cfg.beta_temporal, state.x, state.y
        )
        res = minimize(obj, obj.pack(state.x, state.y), cfg.solver)
        x_new, y_new = obj.unpack(res.x)

        if _is_degenerate(obj, x_new, y_new):
            best = res
            for k in range(4):
                rng = np.random.default_rng(7700 + k)
                xs = model.neutral_x + model.sigmas_x * 0.5 * rng.standard_normal(model.n)
                xb, yb = _alternating_bootstrap(obj, xs, state.y)
                cand = minimize(obj, obj.pack(xb, yb), cfg.solver)
                if cand.fun < best.fun:
                    best = cand
            if best is not res:
                res = best
                x_new, y_new = obj.unpack(res.x)
                bootstrapped = True

    residual = _correspondence_residual(model, vertex_indices, targets, x_new, y_new)
    new_state = replace(
        state,
        x=x_new,
        y=y_new,
        frame_count=state.frame_count + 1,
        x_history=state.x_history if state.frozen else state.x_history + (x_new,),
    )
    if state.frozen and state.pose_basis is not None:
        verts = model.mean + y_new @ state.pose_basis
    else:
        verts = multilinear_vertices(model, x_new, y_new)
    mesh = Mesh(verts.reshape(-1, 3), model.faces)
    return TrackResult(
        state=new_state,
        mesh=mesh,
        residual=residual,
        iterations=res.iterations,
        gradient_norm=res.gradient_norm,
        visible=len(vertex_indices),
        bootstrapped=bootstrapped,
    )


def _is_degenerate(obj: TongueObjective, x, y) -> bool:
    """True when one weight block annihilates the core, pinning the fit.

    At such points (notably (0, 0) with zero neutral weights) the data
    gradient vanishes identically even though the residual is large, so
    descent alone cannot leave them.
    """
    r = x @ np.tensordot(y, obj.core_sel, axes=(0, 1)) - obj.r0
    if float(r @ r) <= 1e-16:
        return False
    jac_y = np.tensordot(x, obj.core_sel, axes=(0, 0))
    jac_x = np.tensordot(y, obj.core_sel, axes=(0, 1))
    scale = float(np.max(np.abs(obj.core_sel))) + 1e-300
    return (
        float(np.max(np.abs(jac_y))) <= 1e-9 * scale
        or float(np.max(np.abs(jac_x))) <= 1e-9 * scale
    )


def _correspondence_residual(model, vertex_indices, targets, x, y) -> float:
    sel = np.asarray([3 * int(v) + k for v in vertex_indices for k in range(3)], dtype=np.intp)
    pose_basis = np.tensordot(x, model.core[:, :, sel], axes=(0, 0))
    v = model.mean[sel] + y @ pose_basis
    diff = (v - np.asarray(targets, dtype=np.float64).reshape(-1)).reshape(-1, 3)
    return float(np.mean(np.linalg.norm(diff, axis=1)))
