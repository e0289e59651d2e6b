"""Equivalent measure changes on the lattice.

A policy assigns a tilt ``theta`` to every node of levels ``0..N-1``; the step
out of ``(t, j)`` then goes up with probability ``(1 + theta sqrt(dt)) / 2``,
which gives the increment a mean of exactly ``theta * dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssumptionViolationError, ParameterError, ShapeError, UnsupportedRuleError
from .lattice import LatticeModel, StoppingRule, check_node_table
from .penalty import PenaltySpec, f_eval

MODULE = "measures"
TILT_MARGIN = 1e-6


def max_tilt(dt: float) -> float:
    """Largest admissible ``|theta|`` for a step of length ``dt``."""
    return (1.0 - TILT_MARGIN) / np.sqrt(dt)


def tilt_probabilities(theta_value, dt: float):
    """One-step (q_up, q_down) under tilt ``theta``; broadcasts over arrays."""
    theta = np.asarray(theta_value, dtype=float)
    s = theta * np.sqrt(dt)
    if np.any(np.abs(s) > 1.0 - TILT_MARGIN + 1e-15):
        worst = float(np.max(np.abs(theta)))
        raise ParameterError(
            f"tilt {worst:.6g} violates |theta| sqrt(dt) <= 1 - {TILT_MARGIN:g} "
            f"(max {max_tilt(dt):.6g} at dt = {dt:g})",
            field="theta", hint="reduce the tilt or refine the lattice", module=MODULE,
        )
    q_up = 0.5 * (1.0 + s)
    q_down = 0.5 * (1.0 - s)
    if q_up.ndim == 0:
        return float(q_up), float(q_down)
    return q_up, q_down


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """Markov tilt policy; ``theta`` is a ``(N, N)`` step table."""

    model: LatticeModel
    theta: np.ndarray
    active_from: int = 0

    def __post_init__(self):
        n = self.model.n_steps
        th = np.array(check_node_table(self.model, self.theta, "theta", steps=True),
                      dtype=float)
        mask = self.model.step_mask()
        th[~mask] = 0.0
        if not np.all(np.isfinite(th)):
            raise ParameterError("theta must be finite", field="theta", module=MODULE)
        if not 0 <= int(self.active_from) <= n:
            raise ParameterError(f"active_from must lie in [0, {n}]",
                                 field="active_from", module=MODULE)
        th[: int(self.active_from)] = 0.0
        tilt_probabilities(th, self.model.dt)
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "active_from", int(self.active_from))

    @classmethod
    def constant(cls, model, value, active_from=0):
        n = model.n_steps
        return cls(model, np.full((n, n), float(value)), active_from)

    @classmethod
    def zero(cls, model, active_from=0):
        return cls.constant(model, 0.0, active_from)

    def level(self, t: int) -> np.ndarray:
        return self.theta[t, : t + 1]

    def probabilities(self):
        return tilt_probabilities(self.theta, self.model.dt)

    def cost_table(self, spec: PenaltySpec) -> np.ndarray:
        """``f(t, theta) * dt`` at every step node."""
        n = self.model.n_steps
        out = np.zeros((n, n))
        for t in range(n):
            out[t, : t + 1] = f_eval(spec, t, self.level(t)) * self.model.dt
        return out


@dataclass(frozen=True, eq=False)
class MeasureDensity:
    """Node-marginal density ``Q(node) / P(node)`` of a tilted measure.

    For a Markov policy on a recombining lattice the pathwise density depends
    on the route into a node; this table is its conditional expectation given
    the node. It is exact whenever the policy is constant, and it is what turns
    reference-measure expectations of node functions into tilted ones.
    """

    model: LatticeModel
    z: np.ndarray
    q_mass: np.ndarray
    p_mass: np.ndarray

    def level_mean(self, t: int) -> float:
        return float(np.sum(self.p_mass[t, : t + 1] * self.z[t, : t + 1]))

    def expect(self, t: int, values) -> float:
        """Tilted expectation of a function of the level-``t`` node."""
        v = np.asarray(values, dtype=float)
        return float(np.sum(self.q_mass[t, : t + 1] * v))


def _check_same_model(*objs):
    first = objs[0].model
    for o in objs[1:]:
        if o.model != first:
            raise ShapeError("objects live on different lattices", module=MODULE)


def density_process(model: LatticeModel, policy: ControlPolicy) -> MeasureDensity:
    if policy.model != model:
        raise ShapeError("policy was built for another lattice", module=MODULE)
    n = model.n_steps
    q_up, q_dn = policy.probabilities()
    qm = np.zeros((n + 1, n + 1))
    pm = np.zeros((n + 1, n + 1))
    qm[0, 0] = pm[0, 0] = 1.0
    for t in range(n):
        k = t + 1
        qm[t + 1, 1 : k + 1] += qm[t, :k] * q_up[t, :k]
        qm[t + 1, :k] += qm[t, :k] * q_dn[t, :k]
        pm[t + 1, 1 : k + 1] += 0.5 * pm[t, :k]
        pm[t + 1, :k] += 0.5 * pm[t, :k]
    mask = model.node_mask()
    z = np.full((n + 1, n + 1), np.nan)
    z[mask] = qm[mask] / pm[mask]
    for a in (z, qm, pm):
        a.setflags(write=False)
    return MeasureDensity(model, z, qm, pm)


def path_density(model: LatticeModel, policy: ControlPolicy, path) -> np.ndarray:
    """Pathwise density ``Z_t`` along a sequence of moves (1 = up, 0 = down)."""
    q_up, q_dn = policy.probabilities()
    out = [1.0]
    for (t, j), move in zip(model.node_of_path(path), path):
        q = q_up[t, j] if move else q_dn[t, j]
        out.append(out[-1] * 2.0 * q)
    return np.asarray(out)


def paste(policy_q: ControlPolicy, policy_qtilde: ControlPolicy, gamma: StoppingRule) -> ControlPolicy:
    """Follow ``policy_q`` while ``gamma`` has not stopped, ``policy_qtilde`` after.

    The step out of ``(t, j)`` uses ``policy_q`` when ``gamma > t`` on every
    path through the node and ``policy_qtilde`` when ``gamma <= t`` on every
    path. A node where this depends on the route is not representable by a
    Markov policy unless both tilts agree there.
    """
    if not isinstance(gamma, StoppingRule):
        raise UnsupportedRuleError(
            f"pasting needs a node-region StoppingRule, got {type(gamma).__name__}",
            field="gamma", hint="use first_hitting_rule on a node region", module=MODULE,
        )
    _check_same_model(policy_q, policy_qtilde, gamma)
    if max(policy_q.active_from, policy_qtilde.active_from) > gamma.floor:
        raise ParameterError("policies must be active no later than gamma's floor",
                             field="gamma.floor", module=MODULE)
    n = policy_q.model.n_steps
    status = gamma.stopped_status()[:n, :n]
    mask = policy_q.model.step_mask()
    mixed = mask & (status == 2) & (policy_q.theta != policy_qtilde.theta)
    if np.any(mixed):
        t, j = map(int, np.argwhere(mixed)[0])
        raise UnsupportedRuleError(
            f"gamma stops some but not all paths through node ({t}, {j}); the pasted "
            "tilt there depends on the path",
            field="gamma", hint="use a rule whose stopped set is closed under successors",
            module=MODULE,
        )
    theta = np.where(status == 0, policy_q.theta, policy_qtilde.theta)
    return ControlPolicy(policy_q.model, theta, policy_q.active_from)


def truncate_policy(policy: ControlPolicy, spec: PenaltySpec, k: float) -> ControlPolicy:
    """Zero the tilt wherever ``|theta| > k`` or ``f(t, theta) > k``."""
    th = policy.theta.copy()
    n = policy.model.n_steps
    for t in range(n):
        row = th[t, : t + 1]
        bad = (np.abs(row) > k) | (np.asarray(f_eval(spec, t, row)) > k)
        row[bad] = 0.0
    return ControlPolicy(policy.model, th, policy.active_from)


def _cost_until(model, spec, policy, stop: StoppingRule, start_level=0) -> float:
    cost = policy.cost_table(spec)
    q_up, q_dn = policy.probabilities()
    n = model.n_steps
    w = np.zeros(n + 1)
    for t in range(n - 1, -1, -1):
        k = t + 1
        cont = q_up[t, :k] * w[1 : k + 1] + q_dn[t, :k] * w[:k]
        if t >= start_level:
            cont = cont + cost[t, :k]
        w = np.where(stop.decision[t, :k], 0.0, cont)
    return float(w[0])


def penalty_cost(model: LatticeModel, spec: PenaltySpec, policy: ControlPolicy,
                 start, stop: StoppingRule, k: float | None = None) -> float:
    """Tilted expectation of ``sum f(t, theta_t) dt`` over steps in [start, stop).

    ``start`` is a time index or a StoppingRule with ``start <= stop`` on every
    path. With ``k`` given, a cost above ``k * T`` raises.
    """
    _check_same_model(policy, stop)
    if isinstance(start, StoppingRule):
        total = _cost_until(model, spec, policy, stop) - _cost_until(model, spec, policy, start)
    else:
        total = _cost_until(model, spec, policy, stop, int(start))
    if k is not None and total > k * model.horizon + 1e-12:
        raise AssumptionViolationError(
            f"expected penalty {total:.6g} exceeds k T = {k * model.horizon:.6g}",
            assumption="Q^k", field="k", module=MODULE,
        )
    return total
