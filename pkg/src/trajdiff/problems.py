"""Planar trajectory-optimization benchmarks: tabletop point-mass and two-car.

Both problems share the same decision-vector layout of length 161:

    index 0     final time t (seconds)
    index 1:    flattened control sequence

tabletop  80 steps x (u_x, u_y) velocity controls, dynamics p' = u,
          start at the table center, goal at one of the four corners,
          four circular obstacles.
twocar    40 steps x (a_1, w_1, a_2, w_2), unicycle dynamics per car
          (p' = v cos/sin theta, v' = a, theta' = w), fixed crossing
          start/goal pairs, two circular obstacles plus an inter-car
          clearance constraint.

Trajectories are explicit-Euler rollouts with dt = t / n_steps.  All batched
routines operate on arrays of shape (B, 161) in physical units and are pure
functions of their arguments, safe for concurrent use.  Gradients of the
violation functional are computed by a hand-derived adjoint sweep through the
rollout, including the dependence of dt on the final time; the sweep reduces
to reversed cumulative sums, so the batch hot path has no per-step Python
loops.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ClampWarning, ConfigError, NumericInputError, PlacementError

WORKSPACE_HALF = 4.0  # workspace is [-4, 4]^2, meters
T_BOUNDS = (4.0, 20.0)  # final-time box, seconds
CONTROL_BOUND = 1.0  # symmetric per-component control box
OBSTACLE_MARGIN = 0.0  # extra clearance added to obstacle radii, meters
INTER_CAR_CLEARANCE = 0.5  # minimum distance between the two cars, meters
TABLETOP_RADIUS_RANGE = (0.3, 1.0)
TWOCAR_RADIUS_RANGE = (0.5, 1.5)
OBSTACLE_BOX_INFLATION = 1.0  # meters around the start/goal bounding box
MAX_PLACEMENT_ATTEMPTS = 10_000
NUMERIC_ZERO = 1e-12  # |V| below this counts as exactly feasible

KIND_TABLETOP = "tabletop"
KIND_TWOCAR = "twocar"
KINDS = (KIND_TABLETOP, KIND_TWOCAR)

TABLETOP_START = np.array([0.0, 0.0])
TABLETOP_CORNERS = np.array([[4.0, 4.0], [4.0, -4.0], [-4.0, 4.0], [-4.0, -4.0]])
# Per-car start state (p_x, p_y, v, theta) and goal position.  The two
# straight-line paths cross at the origin, so the cars must coordinate.
TWOCAR_STARTS = np.array([[-4.0, 0.0, 0.0, 0.0], [0.0, -4.0, 0.0, np.pi / 2]])
TWOCAR_GOALS = np.array([[4.0, 0.0], [0.0, 4.0]])


# ---------------------------------------------------------------------------
# domain types


@dataclass
class ProblemParams:
    """Condition vector y of one problem instance."""

    kind: str
    goals: np.ndarray  # (n_goals, 2) meters
    obstacle_centers: np.ndarray  # (n_obstacles, 2) meters
    obstacle_radii: np.ndarray  # (n_obstacles,) meters

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        self.goals = np.atleast_2d(np.asarray(self.goals, dtype=float))
        self.obstacle_centers = np.asarray(self.obstacle_centers, dtype=float).reshape(
            -1, 2
        )
        self.obstacle_radii = np.asarray(self.obstacle_radii, dtype=float).reshape(-1)
        if self.obstacle_centers.shape[0] != self.obstacle_radii.shape[0]:
            raise ConfigError("obstacle centers and radii counts differ")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "goals": self.goals.tolist(),
            "obstacle_centers": self.obstacle_centers.tolist(),
            "obstacle_radii": self.obstacle_radii.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemParams":
        return cls(
            kind=d["kind"],
            goals=np.asarray(d["goals"], dtype=float),
            obstacle_centers=np.asarray(d["obstacle_centers"], dtype=float),
            obstacle_radii=np.asarray(d["obstacle_radii"], dtype=float),
        )

    def validate(self):
        """Check the sampled-instance invariants (obstacle counts, radii)."""
        problem = get_problem(self.kind)
        lo, hi = problem.radius_range
        if self.obstacle_centers.shape[0] != problem.n_obstacles:
            raise ConfigError(
                f"{self.kind} expects {problem.n_obstacles} obstacles, "
                f"got {self.obstacle_centers.shape[0]}"
            )
        if np.any(self.obstacle_radii < lo) or np.any(self.obstacle_radii > hi):
            raise ConfigError(f"obstacle radii outside [{lo}, {hi}]")
        if np.any(np.abs(self.obstacle_centers) >= WORKSPACE_HALF):
            raise ConfigError("obstacle center on or outside the workspace boundary")
        for p in problem.protected_points(self):
            d = np.linalg.norm(self.obstacle_centers - np.asarray(p)[None, :], axis=1)
            if np.any(d <= self.obstacle_radii):
                raise ConfigError("obstacle covers a start or goal point")


@dataclass
class DecisionVector:
    """Final time plus flattened control sequence.

    When ``normalized`` is set, every component (including the leading time
    slot) lives in [-1, 1] under the per-component affine box map.
    """

    t_final: float
    controls: np.ndarray  # flat, length 160
    normalized: bool = False

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1)

    def to_array(self) -> np.ndarray:
        return np.concatenate(([self.t_final], self.controls))

    @classmethod
    def from_array(cls, arr, normalized: bool = False) -> "DecisionVector":
        arr = np.asarray(arr, dtype=float).reshape(-1)
        return cls(t_final=float(arr[0]), controls=arr[1:].copy(), normalized=normalized)


@dataclass
class Trajectory:
    """Euler rollout of one decision vector.

    ``states`` has shape (n_steps + 1, 2) for tabletop and
    (n_steps + 1, 2, 4) for twocar (step, car, [p_x, p_y, v, theta]).
    """

    states: np.ndarray
    dt: float


@dataclass
class StackedParams:
    """Per-row problem parameters for batched evaluation.

    Same roles as :class:`ProblemParams` but with a leading batch axis:
    goals (B, G, 2), obstacle_centers (B, O, 2), obstacle_radii (B, O).
    """

    kind: str
    goals: np.ndarray
    obstacle_centers: np.ndarray
    obstacle_radii: np.ndarray


def stack_params(params_list) -> StackedParams:
    """Stack a homogeneous list of ProblemParams along a batch axis."""
    kinds = {p.kind for p in params_list}
    if len(kinds) != 1:
        raise ConfigError(f"cannot stack mixed problem kinds {sorted(kinds)}")
    return StackedParams(
        kind=kinds.pop(),
        goals=np.stack([p.goals for p in params_list]),
        obstacle_centers=np.stack([p.obstacle_centers for p in params_list]),
        obstacle_radii=np.stack([p.obstacle_radii for p in params_list]),
    )


@dataclass
class ConstraintValues:
    """Stacked inequality (g <= 0 satisfied) and equality (h = 0) values.

    Inequality layout: tabletop flattens (step, obstacle) row-major over
    states 1..80; twocar stacks the (step, car, obstacle) obstacle block
    (160 entries) followed by the per-step inter-car block (40 entries).
    Equalities are the terminal position errors per goal coordinate.
    """

    inequality: np.ndarray
    equality: np.ndarray


@dataclass
class ViolationReport:
    """Total violation V = sum(max(g, 0)) + sum(|h|) with a category split."""

    total: float
    by_category: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# problem definitions


class _ProblemBase:
    kind: str
    n_steps: int
    control_dim: int
    n_obstacles: int
    radius_range: tuple
    objective_threshold: float  # dataset quality filter, seconds

    def __init__(self):
        n = self.n_steps * self.control_dim
        self.dim = 1 + n
        self.lower = np.concatenate(([T_BOUNDS[0]], np.full(n, -CONTROL_BOUND)))
        self.upper = np.concatenate(([T_BOUNDS[1]], np.full(n, CONTROL_BOUND)))
        self.box_center = 0.5 * (self.lower + self.upper)
        self.box_halfwidth = 0.5 * (self.upper - self.lower)

    # -- normalization -------------------------------------------------------

    def normalize_array(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.box_center) / self.box_halfwidth

    def denormalize_array(self, X: np.ndarray) -> np.ndarray:
        return self.box_center + self.box_halfwidth * np.asarray(X, dtype=float)

    # -- shared pieces -------------------------------------------------------

    def _split(self, X: np.ndarray):
        """(B, dim) -> t (B,), controls (B, n_steps, control_dim), dt (B,)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not np.all(np.isfinite(X)):
            raise NumericInputError("decision vector contains non-finite values")
        t = X[:, 0]
        u = X[:, 1:].reshape(X.shape[0], self.n_steps, self.control_dim)
        return t, u, t / self.n_steps

    def violation_batch(self, X: np.ndarray, params: ProblemParams) -> np.ndarray:
        """Total violation per row of ``X`` (physical units)."""
        g, h = self.constraint_values_batch(X, params)
        return np.maximum(g, 0.0).sum(axis=1) + np.abs(h).sum(axis=1)

    def violation_gradient_batch(self, X: np.ndarray, params: ProblemParams) -> np.ndarray:
        """dV/dx per row; subgradient 0 at kinks (g = 0, h = 0)."""
        g, h = self.constraint_values_batch(X, params)
        w_ineq = (g > 0.0).astype(float)
        w_eq = np.sign(h)
        return self.weighted_constraint_gradient_batch(X, params, w_ineq, w_eq)


class TabletopProblem(_ProblemBase):
    """Velocity-controlled point moving from the table center to a corner."""

    kind = KIND_TABLETOP
    n_steps = 80
    control_dim = 2
    n_obstacles = 4
    radius_range = TABLETOP_RADIUS_RANGE
    objective_threshold = 12.0
    n_eq = 2

    @property
    def n_ineq(self):
        return self.n_steps * self.n_obstacles

    def rollout_batch(self, X: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
        """States (B, n_steps + 1, 2); ``start`` overrides the fixed start."""
        t, u, dt = self._split(X)
        p0 = TABLETOP_START if start is None else np.asarray(start, dtype=float)
        B = u.shape[0]
        states = np.empty((B, self.n_steps + 1, 2))
        states[:, 0] = p0
        states[:, 1:] = p0 + dt[:, None, None] * np.cumsum(u, axis=1)
        return states

    def constraint_values_batch(self, X: np.ndarray, params):
        p = self.rollout_batch(X)[:, 1:]  # states 1..N, (B, N, 2)
        centers, radii = _obstacle_views(params, extra_axes=1)
        goal = params.goals[:, 0] if params.goals.ndim == 3 else params.goals[0]
        diff = p[:, :, None, :] - centers  # (B, N, O, 2)
        dist = np.linalg.norm(diff, axis=-1)
        g = (radii + OBSTACLE_MARGIN) - dist
        h = p[:, -1] - goal
        return g.reshape(p.shape[0], -1), h

    def weighted_constraint_gradient_batch(self, X, params, w_ineq, w_eq):
        """Gradient of sum(w_ineq * g) + sum(w_eq * h) via the adjoint sweep."""
        t, u, dt = self._split(X)
        B = u.shape[0]
        p = self.rollout_batch(X)[:, 1:]
        centers, _ = _obstacle_views(params, extra_axes=1)
        diff = p[:, :, None, :] - centers
        dist = np.maximum(np.linalg.norm(diff, axis=-1), 1e-12)
        w = w_ineq.reshape(B, self.n_steps, -1)
        # dg/dp = -diff/dist per obstacle term
        Gp = -np.einsum("bno,bnoc->bnc", w / dist, diff)
        Gp[:, -1] += w_eq
        lam = np.cumsum(Gp[:, ::-1], axis=1)[:, ::-1]  # lam[:, i] = costate at state i+1
        grad = np.empty((B, self.dim))
        grad[:, 0] = np.einsum("bnc,bnc->b", u, lam) / self.n_steps
        grad[:, 1:] = (dt[:, None, None] * lam).reshape(B, -1)
        return grad

    def category_split(self, g, h):
        return {
            "obstacle": np.maximum(g, 0.0).sum(axis=-1),
            "goal": np.abs(h).sum(axis=-1),
            "inter_car": np.zeros(g.shape[0]),
        }

    @property
    def condition_dim(self):
        return 2 + 3 * self.n_obstacles

    def condition_vector(self, params: ProblemParams) -> np.ndarray:
        """Flattened y scaled to [-1, 1]: goal, obstacle centers, radii."""
        lo, hi = self.radius_range
        r = (params.obstacle_radii - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
        return np.concatenate(
            [
                params.goals[0] / WORKSPACE_HALF,
                params.obstacle_centers.reshape(-1) / WORKSPACE_HALF,
                r,
            ]
        )

    def protected_points(self, params):
        return [TABLETOP_START, params.goals[0]]

    def sample_params(self, rng: np.random.Generator) -> ProblemParams:
        goal = TABLETOP_CORNERS[rng.integers(4)]
        box_lo = np.clip(
            np.minimum(TABLETOP_START, goal) - OBSTACLE_BOX_INFLATION,
            -WORKSPACE_HALF,
            WORKSPACE_HALF,
        )
        box_hi = np.clip(
            np.maximum(TABLETOP_START, goal) + OBSTACLE_BOX_INFLATION,
            -WORKSPACE_HALF,
            WORKSPACE_HALF,
        )
        protected = [TABLETOP_START, goal]
        attempts = 0
        while True:
            centers = np.empty((self.n_obstacles, 2))
            radii = np.empty(self.n_obstacles)
            for i in range(self.n_obstacles):
                while True:
                    attempts += 1
                    if attempts > MAX_PLACEMENT_ATTEMPTS:
                        raise PlacementError(
                            "obstacle placement failed after "
                            f"{MAX_PLACEMENT_ATTEMPTS} attempts"
                        )
                    c = rng.uniform(box_lo, box_hi)
                    r = rng.uniform(*self.radius_range)
                    if np.all(np.abs(c) < WORKSPACE_HALF) and all(
                        np.linalg.norm(c - p) > r for p in protected
                    ):
                        centers[i], radii[i] = c, r
                        break
            # at least one obstacle must block the straight start-goal segment
            if np.any(_segment_point_distance(TABLETOP_START, goal, centers) <= radii):
                return ProblemParams(
                    kind=self.kind,
                    goals=goal[None, :],
                    obstacle_centers=centers,
                    obstacle_radii=radii,
                )


class TwoCarProblem(_ProblemBase):
    """Two unicycle cars crossing to fixed goals among shared obstacles."""

    kind = KIND_TWOCAR
    n_steps = 40
    control_dim = 4  # (a_1, w_1, a_2, w_2)
    n_obstacles = 2
    radius_range = TWOCAR_RADIUS_RANGE
    objective_threshold = 14.0
    n_cars = 2
    n_eq = 4

    @property
    def n_ineq(self):
        return self.n_steps * self.n_cars * self.n_obstacles + self.n_steps

    def _integrate(self, u, dt, s0):
        """Post-step v, theta (B, N, car) and the pre-step values feeding p."""
        B, N = u.shape[0], self.n_steps
        uc = u.reshape(B, N, self.n_cars, 2)
        a, om = uc[..., 0], uc[..., 1]
        v = s0[None, None, :, 2] + dt[:, None, None] * np.cumsum(a, axis=1)
        th = s0[None, None, :, 3] + dt[:, None, None] * np.cumsum(om, axis=1)
        v0 = np.broadcast_to(s0[None, None, :, 2], (B, 1, self.n_cars))
        th0 = np.broadcast_to(s0[None, None, :, 3], (B, 1, self.n_cars))
        v_pre = np.concatenate([v0, v[:, :-1]], axis=1)
        th_pre = np.concatenate([th0, th[:, :-1]], axis=1)
        return a, om, v, th, v_pre, th_pre

    def rollout_batch(self, X: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
        """States (B, n_steps + 1, 2 cars, 4); per-car (p_x, p_y, v, theta)."""
        t, u, dt = self._split(X)
        B, N = u.shape[0], self.n_steps
        s0 = TWOCAR_STARTS if start is None else np.asarray(start, dtype=float)
        a, om, v, th, v_pre, th_pre = self._integrate(u, dt, s0)
        states = np.empty((B, N + 1, self.n_cars, 4))
        states[:, 0] = s0
        states[:, 1:, :, 2] = v
        states[:, 1:, :, 3] = th
        states[:, 1:, :, 0] = s0[None, None, :, 0] + dt[:, None, None] * np.cumsum(
            v_pre * np.cos(th_pre), axis=1
        )
        states[:, 1:, :, 1] = s0[None, None, :, 1] + dt[:, None, None] * np.cumsum(
            v_pre * np.sin(th_pre), axis=1
        )
        return states

    def constraint_values_batch(self, X: np.ndarray, params):
        p = self.rollout_batch(X)[:, 1:, :, :2]  # (B, N, car, 2)
        B = p.shape[0]
        centers, radii = _obstacle_views(params, extra_axes=2)
        diff = p[:, :, :, None, :] - centers
        dist = np.linalg.norm(diff, axis=-1)  # (B, N, car, O)
        g_obs = (radii + OBSTACLE_MARGIN) - dist
        d_cars = np.linalg.norm(p[:, :, 0] - p[:, :, 1], axis=-1)  # (B, N)
        g_ic = INTER_CAR_CLEARANCE - d_cars
        h = (p[:, -1] - TWOCAR_GOALS[None]).reshape(B, -1)
        return np.concatenate([g_obs.reshape(B, -1), g_ic], axis=1), h

    def weighted_constraint_gradient_batch(self, X, params, w_ineq, w_eq):
        """Adjoint sweep through the unicycle rollout (reversed cumsums)."""
        t, u, dt = self._split(X)
        B, N = u.shape[0], self.n_steps
        s0 = TWOCAR_STARTS
        a, om, v, th, v_pre, th_pre = self._integrate(u, dt, s0)
        px = s0[None, None, :, 0] + dt[:, None, None] * np.cumsum(
            v_pre * np.cos(th_pre), axis=1
        )
        py = s0[None, None, :, 1] + dt[:, None, None] * np.cumsum(
            v_pre * np.sin(th_pre), axis=1
        )
        p = np.stack([px, py], axis=-1)  # (B, N, car, 2)

        n_obs_entries = N * self.n_cars * self.n_obstacles
        w_obs = w_ineq[:, :n_obs_entries].reshape(B, N, self.n_cars, self.n_obstacles)
        w_ic = w_ineq[:, n_obs_entries:]

        centers, _ = _obstacle_views(params, extra_axes=2)
        diff = p[:, :, :, None, :] - centers
        dist = np.maximum(np.linalg.norm(diff, axis=-1), 1e-12)
        Gp = -np.einsum("bnco,bncoj->bncj", w_obs / dist, diff)  # (B, N, car, 2)

        dc = p[:, :, 0] - p[:, :, 1]
        dc_dist = np.maximum(np.linalg.norm(dc, axis=-1), 1e-12)
        ic = (w_ic / dc_dist)[..., None] * dc
        Gp[:, :, 0] -= ic
        Gp[:, :, 1] += ic

        Gp[:, -1] += w_eq.reshape(B, self.n_cars, 2)

        # position costate at state i+1; positions never feed the dynamics
        lamP = np.cumsum(Gp[:, ::-1], axis=1)[:, ::-1]

        cos, sin = np.cos(th_pre), np.sin(th_pre)
        # v and theta costates: lam_i = lam_{i+1} + source_i, reversed cumsums
        # shifted by one because controls feed the *next* state
        sv = dt[:, None, None] * (cos * lamP[..., 0] + sin * lamP[..., 1])
        sth = dt[:, None, None] * v_pre * (-sin * lamP[..., 0] + cos * lamP[..., 1])
        zero = np.zeros((B, 1, self.n_cars))
        lamV_next = np.concatenate(
            [np.cumsum(sv[:, :0:-1], axis=1)[:, ::-1], zero], axis=1
        )
        lamTh_next = np.concatenate(
            [np.cumsum(sth[:, :0:-1], axis=1)[:, ::-1], zero], axis=1
        )

        d_dt = (
            np.einsum("bnc,bnc->b", v_pre * cos, lamP[..., 0])
            + np.einsum("bnc,bnc->b", v_pre * sin, lamP[..., 1])
            + np.einsum("bnc,bnc->b", a, lamV_next)
            + np.einsum("bnc,bnc->b", om, lamTh_next)
        )

        grad = np.empty((B, self.dim))
        grad[:, 0] = d_dt / N
        du = np.stack(
            [dt[:, None, None] * lamV_next, dt[:, None, None] * lamTh_next], axis=-1
        )  # (B, N, car, 2)
        grad[:, 1:] = du.reshape(B, -1)
        return grad

    def category_split(self, g, h):
        n_obs_entries = self.n_steps * self.n_cars * self.n_obstacles
        return {
            "obstacle": np.maximum(g[..., :n_obs_entries], 0.0).sum(axis=-1),
            "goal": np.abs(h).sum(axis=-1),
            "inter_car": np.maximum(g[..., n_obs_entries:], 0.0).sum(axis=-1),
        }

    @property
    def condition_dim(self):
        return 3 * self.n_obstacles

    def condition_vector(self, params: ProblemParams) -> np.ndarray:
        """Flattened y scaled to [-1, 1]: obstacle centers and radii.

        Goals are fixed for this problem and carry no information.
        """
        lo, hi = self.radius_range
        r = (params.obstacle_radii - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
        return np.concatenate([params.obstacle_centers.reshape(-1) / WORKSPACE_HALF, r])

    def protected_points(self, params):
        return [
            TWOCAR_STARTS[0, :2],
            TWOCAR_STARTS[1, :2],
            TWOCAR_GOALS[0],
            TWOCAR_GOALS[1],
        ]

    def sample_params(self, rng: np.random.Generator) -> ProblemParams:
        pts = np.vstack([TWOCAR_STARTS[:, :2], TWOCAR_GOALS])
        box_lo = np.clip(
            pts.min(axis=0) - OBSTACLE_BOX_INFLATION, -WORKSPACE_HALF, WORKSPACE_HALF
        )
        box_hi = np.clip(
            pts.max(axis=0) + OBSTACLE_BOX_INFLATION, -WORKSPACE_HALF, WORKSPACE_HALF
        )
        attempts = 0
        centers = np.empty((self.n_obstacles, 2))
        radii = np.empty(self.n_obstacles)
        for i in range(self.n_obstacles):
            while True:
                attempts += 1
                if attempts > MAX_PLACEMENT_ATTEMPTS:
                    raise PlacementError(
                        f"obstacle placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts"
                    )
                c = rng.uniform(box_lo, box_hi)
                r = rng.uniform(*self.radius_range)
                if np.all(np.abs(c) < WORKSPACE_HALF) and all(
                    np.linalg.norm(c - p) > r for p in pts
                ):
                    centers[i], radii[i] = c, r
                    break
        return ProblemParams(
            kind=self.kind,
            goals=TWOCAR_GOALS.copy(),
            obstacle_centers=centers,
            obstacle_radii=radii,
        )


def _obstacle_views(params, extra_axes: int):
    """Centers/radii broadcastable over (B, N, [car,] O) evaluation shapes.

    Accepts shared (O, 2)/(O,) arrays or per-row stacked (B, O, 2)/(B, O).
    """
    c, r = params.obstacle_centers, params.obstacle_radii
    if c.ndim == 3:
        sl = (slice(None),) + (None,) * extra_axes
        return c[sl], r[sl]
    sl = (None,) * (extra_axes + 1)
    return c[sl], r[sl]


def _segment_point_distance(a, b, points) -> np.ndarray:
    """Distance from each of ``points`` (N, 2) to the segment a-b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    s = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + s[:, None] * ab
    return np.linalg.norm(points - proj, axis=-1)


_TABLETOP = TabletopProblem()
_TWOCAR = TwoCarProblem()
_PROBLEMS = {KIND_TABLETOP: _TABLETOP, KIND_TWOCAR: _TWOCAR}


def get_problem(kind: str) -> _ProblemBase:
    try:
        return _PROBLEMS[kind]
    except KeyError:
        raise ConfigError(f"unknown problem kind {kind!r}") from None


# ---------------------------------------------------------------------------
# single-vector operations


def sample_problem_params(rng_seed: int, kind: str) -> ProblemParams:
    """Sample one problem instance; deterministic for a given seed."""
    problem = get_problem(kind)
    rng = np.random.default_rng(rng_seed)
    params = problem.sample_params(rng)
    params.validate()
    return params


def _physical_array(x: DecisionVector) -> np.ndarray:
    if x.normalized:
        raise ConfigError("expected a decision vector in physical units")
    return x.to_array()


def rollout(x: DecisionVector, params: ProblemParams) -> Trajectory:
    """Explicit-Euler rollout with dt = t_final / n_steps."""
    problem = get_problem(params.kind)
    arr = _physical_array(x)
    states = problem.rollout_batch(arr[None, :])[0]
    return Trajectory(states=states, dt=float(arr[0]) / problem.n_steps)


def evaluate_objective(x: DecisionVector, params: ProblemParams) -> float:
    """Objective is the final time; controls do not enter."""
    return float(_physical_array(x)[0])


def evaluate_constraints(x: DecisionVector, params: ProblemParams) -> ConstraintValues:
    problem = get_problem(params.kind)
    g, h = problem.constraint_values_batch(_physical_array(x)[None, :], params)
    return ConstraintValues(inequality=g[0], equality=h[0])


def violation(x: DecisionVector, params: ProblemParams) -> ViolationReport:
    """V = sum of positive inequality parts plus absolute equality residuals."""
    problem = get_problem(params.kind)
    g, h = problem.constraint_values_batch(_physical_array(x)[None, :], params)
    by_category = {k: float(v[0]) for k, v in problem.category_split(g, h).items()}
    return ViolationReport(
        total=float(sum(by_category.values())), by_category=by_category
    )


def violation_gradient(x: DecisionVector, params: ProblemParams) -> np.ndarray:
    """Gradient of the total violation with respect to every component of x."""
    problem = get_problem(params.kind)
    return problem.violation_gradient_batch(_physical_array(x)[None, :], params)[0]


def _problem_for_dim(size: int) -> _ProblemBase:
    if size != _TABLETOP.dim:
        raise ConfigError(f"decision vector has length {size}, expected {_TABLETOP.dim}")
    return _TABLETOP  # boxes are identical for both kinds


def normalize(x: DecisionVector) -> DecisionVector:
    """Affine map of every component onto [-1, 1] (boxes are kind-independent)."""
    if x.normalized:
        raise ConfigError("decision vector is already normalized")
    arr = x.to_array()
    problem = _problem_for_dim(arr.size)
    if np.any(arr < problem.lower - 1e-12) or np.any(arr > problem.upper + 1e-12):
        warnings.warn(
            "physical decision vector outside its box; clamping",
            ClampWarning,
            stacklevel=2,
        )
        arr = np.clip(arr, problem.lower, problem.upper)
    return DecisionVector.from_array(problem.normalize_array(arr), normalized=True)


def denormalize(x: DecisionVector) -> DecisionVector:
    """Inverse of :func:`normalize`."""
    if not x.normalized:
        raise ConfigError("decision vector is already in physical units")
    arr = x.to_array()
    problem = _problem_for_dim(arr.size)
    return DecisionVector.from_array(problem.denormalize_array(arr), normalized=False)
