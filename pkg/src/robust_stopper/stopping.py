"""Snell envelopes, robust values and stopping times on the lattice.

The game payoff from level ``nu`` is ``E_Q[Y_gamma + sum_{nu <= t < gamma} f(t, theta_t) dt]``.
The stopper maximizes it, the adversary picking ``Q`` minimizes it. Levels
below ``nu`` carry no stopping and no tilt; their entries are the reference
expectation of the level-``nu`` values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError
from .lattice import LatticeModel, PayoffProcess, StoppingRule, first_hitting_rule
from .measures import ControlPolicy, TILT_MARGIN, tilt_probabilities
from .penalty import PenaltySpec, f_conjugate, f_eval

MODULE = "stopping"


def tol_hit(Y: PayoffProcess) -> float:
    return 1e-9 * max(1.0, Y.sup_norm())


@dataclass(frozen=True)
class ThetaGrid:
    """Finite set of tilts the adversary may use, all inside ``Q^k``.

    Values are kept in tie-break order: smallest ``|theta|`` first, the
    negative one before the positive one. Zero is always included.
    """

    values: tuple
    k: float

    def __post_init__(self):
        vals = {float(v) for v in self.values} | {0.0}
        ordered = tuple(sorted(vals, key=lambda x: (abs(x), x)))
        object.__setattr__(self, "values", ordered)
        object.__setattr__(self, "k", float(self.k))

    @classmethod
    def for_bound(cls, model: LatticeModel, spec: PenaltySpec, k: float, points: int):
        """Evenly spaced tilts in ``[-k, k]`` that satisfy the ``Q^k`` bound
        and the lattice admissibility constraint."""
        cand = np.linspace(-k, k, int(points))
        limit = (1.0 - TILT_MARGIN) / np.sqrt(model.dt)
        keep = [float(x) for x in cand if abs(x) <= limit and
                all(f_eval(spec, t, x) <= k for t in range(model.n_steps))]
        return cls(tuple(keep), k)

    @property
    def size(self) -> int:
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def validate(self, model: LatticeModel, spec: PenaltySpec) -> None:
        th = self.array()
        tilt_probabilities(th, model.dt)
        if np.any(np.abs(th) > self.k):
            raise ParameterError(
                f"grid tilt {th[np.argmax(np.abs(th))]:.6g} exceeds the bound k = {self.k:g}",
                field="grid.k", hint="raise k or drop the tilt", module=MODULE,
            )
        for t in range(model.n_steps):
            ft = np.asarray(f_eval(spec, t, th))
            if np.any(ft > self.k):
                bad = th[np.argmax(ft)]
                raise ParameterError(
                    f"f({t}, {bad:.6g}) = {float(np.max(ft)):.6g} exceeds k = {self.k:g}",
                    field="grid.k", hint="raise k or drop the tilt", module=MODULE,
                )

    def issubset(self, other: "ThetaGrid") -> bool:
        return set(self.values) <= set(other.values)

    def cost_table(self, model: LatticeModel, spec: PenaltySpec) -> np.ndarray:
        th = self.array()
        return np.stack([np.asarray(f_eval(spec, t, th)) * model.dt
                         for t in range(model.n_steps)])


@dataclass(frozen=True, eq=False)
class SnellResult:
    model: LatticeModel
    r: np.ndarray
    tau_region: np.ndarray
    nu: int = 0


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Robust value ``V`` with its stop region ``{V = Y}``.

    ``theta`` holds the adversary's minimizing tilt per step node (the grid
    argmin in grid mode, ``z*`` of the slope in exact mode); ``slope`` the
    lattice martingale slope ``(V_up - V_down) / (2 sqrt(dt))``.
    """

    model: LatticeModel
    v: np.ndarray
    stop_region: np.ndarray
    mode: str
    nu: int = 0
    theta: np.ndarray | None = None
    slope: np.ndarray | None = None
    grid: ThetaGrid | None = None

    def root(self) -> float:
        return float(self.v[0, 0])

    def policy(self) -> ControlPolicy:
        if self.theta is None:
            raise ParameterError("this surface carries no tilt table", module=MODULE)
        return ControlPolicy(self.model, self.theta, self.nu)


def _check_nu(model: LatticeModel, nu: int) -> int:
    if not 0 <= int(nu) <= model.n_steps:
        raise ParameterError(f"nu must lie in [0, {model.n_steps}], got {nu}",
                             field="nu", module=MODULE)
    return int(nu)


def _check_model(model, *objs):
    for o in objs:
        if o is not None and o.model != model:
            raise ShapeError(f"{type(o).__name__} lives on a different lattice",
                             module=MODULE)


def _stop_modes(model: LatticeModel, nu: int) -> np.ndarray:
    n = model.n_steps
    mode = np.ones((n + 1, n + 1), dtype=np.uint8)
    mode[:nu] = 0
    mode[n] = 2
    return mode


def _region(model, v, Y, nu, tol):
    region = np.abs(v - Y.values) <= tol
    region &= model.node_mask()
    region[:nu] = False
    return region


def snell_envelope(model: LatticeModel, Y: PayoffProcess, spec: PenaltySpec,
                   policy: ControlPolicy, nu: int = 0, tol: float | None = None) -> SnellResult:
    """Snell envelope of ``Y`` plus accumulated penalty under a fixed policy."""
    _check_model(model, Y, policy)
    nu = _check_nu(model, nu)
    tol = tol_hit(Y) if tol is None else tol
    n = model.n_steps
    cost = policy.cost_table(spec)
    q_up, q_dn = policy.probabilities()
    r = np.full((n + 1, n + 1), np.nan)
    r[n, : n + 1] = Y.values[n, : n + 1]
    for t in range(n - 1, -1, -1):
        k = t + 1
        cont = cost[t, :k] + q_up[t, :k] * r[t + 1, 1 : k + 1] + q_dn[t, :k] * r[t + 1, :k]
        r[t, :k] = np.maximum(Y.values[t, :k], cont) if t >= nu else cont
    return SnellResult(model, r, _region(model, r, Y, nu, tol), nu)


def robust_value_grid(model: LatticeModel, Y: PayoffProcess, spec: PenaltySpec,
                      grid: ThetaGrid, nu: int = 0, tol: float | None = None,
                      backend: str | None = None) -> ValueSurface:
    """``V_t = max(Y_t, min_theta f(t, theta) dt + q_up V_up + q_down V_down)``
    with ``theta`` ranging over the grid."""
    _check_model(model, Y)
    nu = _check_nu(model, nu)
    grid.validate(model, spec)
    tol = tol_hit(Y) if tol is None else tol
    th = grid.array()
    q_up, q_dn = tilt_probabilities(th, model.dt)
    v, arg = kernels.grid_backward(Y.values, grid.cost_table(model, spec),
                                   np.atleast_1d(q_up), np.atleast_1d(q_dn),
                                   _stop_modes(model, nu), nu, backend=backend)
    theta = np.where(model.step_mask(), th[arg], 0.0)
    return ValueSurface(model, v, _region(model, v, Y, nu, tol), "grid", nu,
                        theta=theta, grid=grid)


def robust_value_exact(model: LatticeModel, Y: PayoffProcess, spec: PenaltySpec,
                       nu: int = 0, tol: float | None = None) -> ValueSurface:
    """Continuum adversary through the transform:
    ``V_t = max(Y_t, mean(V_up, V_down) + f~(t, Z_t) dt)``."""
    _check_model(model, Y)
    nu = _check_nu(model, nu)
    tol = tol_hit(Y) if tol is None else tol
    n = model.n_steps
    sq = model.increment
    v = np.full((n + 1, n + 1), np.nan)
    slope = np.zeros((n, n))
    v[n, : n + 1] = Y.values[n, : n + 1]
    for t in range(n - 1, -1, -1):
        k = t + 1
        up, dn = v[t + 1, 1 : k + 1], v[t + 1, :k]
        z = (up - dn) / (2.0 * sq)
        slope[t, :k] = z
        mean = 0.5 * (up + dn)
        if t >= nu:
            cont = mean + np.asarray(f_conjugate(spec, t, z)) * model.dt
            v[t, :k] = np.maximum(Y.values[t, :k], cont)
        else:
            v[t, :k] = mean
    return ValueSurface(model, v, _region(model, v, Y, nu, tol), "exact", nu, slope=slope)


def tau_V(model: LatticeModel, vsurface: ValueSurface, Y: PayoffProcess,
          nu: int = 0) -> StoppingRule:
    """First time at or after ``nu`` that the value meets the payoff."""
    _check_model(model, vsurface, Y)
    return first_hitting_rule(model, vsurface.stop_region, _check_nu(model, nu))


def _check_grid_sequence(grids):
    for a, b in zip(grids, grids[1:]):
        if b.k < a.k or not a.issubset(b):
            raise ParameterError(
                f"grids must increase: k {a.k:g} -> {b.k:g}, subset={a.issubset(b)}",
                field="grids", hint="order grids by k and nest their tilts", module=MODULE,
            )


def tau_family(model: LatticeModel, Y: PayoffProcess, spec: PenaltySpec, grids,
               nu: int = 0) -> list[StoppingRule]:
    """Earliest optimal stopping time over each grid's policies.

    For a grid, the pathwise minimum of ``tau^Q`` over all node-wise policies
    is the first hit of the union of their regions ``{R^Q = Y}``. The minimal
    envelope over those policies is attained by the grid argmin policy at
    every node at once, so that union is that policy's own region.
    """
    grids = list(grids)
    if not grids:
        raise ParameterError("need at least one grid", field="grids", module=MODULE)
    _check_grid_sequence(grids)
    out = []
    for grid in grids:
        vs = robust_value_grid(model, Y, spec, grid, nu)
        snell = snell_envelope(model, Y, spec, vs.policy(), nu)
        out.append(first_hitting_rule(model, snell.tau_region, nu))
    return out


def stabilization_index(rules) -> int:
    """Smallest ``i`` after which every rule in the sequence equals ``rules[i]``.

    The earliest-stopping rules shrink pathwise as the grids grow; the limit is
    reported through this index rather than asserted.
    """
    rules = list(rules)
    if not rules:
        raise ParameterError("need at least one rule", field="rules", module=MODULE)
    last = rules[-1]
    mask = last.model.node_mask()
    i = len(rules) - 1
    while i > 0 and np.array_equal(rules[i - 1].decision[mask], last.decision[mask]):
        i -= 1
    return i


def _backward_fixed(model, payoff, spec, policy, stop: StoppingRule):
    cost = policy.cost_table(spec)
    q_up, q_dn = policy.probabilities()
    n = model.n_steps
    w = np.full((n + 1, n + 1), np.nan)
    w[n, : n + 1] = payoff[n, : n + 1]
    for t in range(n - 1, -1, -1):
        k = t + 1
        cont = cost[t, :k] + q_up[t, :k] * w[t + 1, 1 : k + 1] + q_dn[t, :k] * w[t + 1, :k]
        w[t, :k] = np.where(stop.decision[t, :k], payoff[t, :k], cont)
    return w


def evaluate_strategy(model: LatticeModel, Y: PayoffProcess, spec: PenaltySpec,
                      policy: ControlPolicy, stop: StoppingRule, nu: int = 0) -> np.ndarray:
    """Payoff of a (policy, stopping rule) pair at each level-``nu`` node."""
    _check_model(model, Y, policy, stop)
    nu = _check_nu(model, nu)
    if stop.floor < nu:
        raise ParameterError(f"stopping floor {stop.floor} precedes nu = {nu}",
                             field="stop.floor", module=MODULE)
    w = _backward_fixed(model, Y.values, spec, policy, stop)
    return w[nu, : nu + 1].copy()


def strategy_table(model, Y, spec, policy, stop) -> np.ndarray:
    """Value-to-go of a fixed strategy for a path arriving unstopped at each node."""
    _check_model(model, Y, policy, stop)
    return _backward_fixed(model, Y.values, spec, policy, stop)


def worst_case_response(model: LatticeModel, payoff, spec: PenaltySpec, grid: ThetaGrid,
                        stop: StoppingRule, nu: int = 0, backend=None):
    """Adversary's best reply to a fixed stopping rule.

    Returns the table of ``min_Q E_Q[payoff_stop + sum f dt]`` for paths arriving
    unstopped at each node, and the minimizing policy. ``payoff`` is a
    PayoffProcess or a node table.
    """
    values = payoff.values if isinstance(payoff, PayoffProcess) else np.asarray(payoff, float)
    nu = _check_nu(model, nu)
    grid.validate(model, spec)
    th = grid.array()
    q_up, q_dn = tilt_probabilities(th, model.dt)
    mode = np.where(stop.decision, 2, 0).astype(np.uint8)
    filled = np.where(model.node_mask(), values, 0.0)
    w, arg = kernels.grid_backward(filled, grid.cost_table(model, spec), np.atleast_1d(q_up),
                                   np.atleast_1d(q_dn), mode, nu, backend=backend)
    theta = np.where(model.step_mask(), th[arg], 0.0)
    return w, ControlPolicy(model, theta, nu)


def evaluate_rho(model: LatticeModel, spec: PenaltySpec, grid: ThetaGrid, nu: int,
                 gamma: StoppingRule, xi) -> np.ndarray:
    """``rho_{nu,gamma}(xi) = max_Q E_Q[-xi_gamma - sum f dt]`` per level-``nu`` node.

    ``xi`` is a node table (or PayoffProcess) read where ``gamma`` stops.
    """
    nu = _check_nu(model, nu)
    if gamma.floor < nu:
        raise ParameterError(f"gamma's floor {gamma.floor} precedes nu = {nu}",
                             field="gamma.floor", module=MODULE)
    w, _ = worst_case_response(model, xi, spec, grid, gamma, nu)
    return -w[nu, : nu + 1]
