"""Reflected backward equations on the lattice and saddle-point extraction.

The explicit scheme per step node is::

    E = (G_up + G_down) / 2
    Z = (G_up - G_down) / (2 sqrt(dt))
    G_hat = E + h(t, E, Z) dt
    G = max(S, G_hat),   dK = G - G_hat >= 0

so ``dK`` is positive only where ``G`` sits on the obstacle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LatticeTooCoarseError, ObstacleViolationError, ShapeError
from .lattice import LatticeModel, PayoffProcess, StoppingRule, all_region_rules, first_hitting_rule
from .measures import ControlPolicy, MeasureDensity, density_process, max_tilt
from .penalty import PenaltySpec, f_conjugate, f_eval, z_star
from .stopping import ThetaGrid, _backward_fixed, snell_envelope, tol_hit, worst_case_response

MODULE = "rbsde"
EXHAUSTIVE_RULE_STEPS = 4
EXHAUSTIVE_POLICY_CAP = 20000
SAMPLED_DEVIATIONS = 200


@dataclass(frozen=True, eq=False)
class RBSDESolution:
    model: LatticeModel
    gamma: np.ndarray
    z: np.ndarray
    dk: np.ndarray
    obstacle: np.ndarray

    @property
    def k_path(self) -> np.ndarray:
        """Cumulative reflection ``K`` along the all-down path is not defined on
        a recombining lattice; this returns the per-level total of ``dK``."""
        return np.nansum(self.dk, axis=1)

    def flat_off_violation(self, tol: float) -> float:
        """Largest ``dK * (G - S)`` over step nodes where ``dK > 0``."""
        n = self.model.n_steps
        gap = self.gamma[:n, :n] - self.obstacle[:n, :n]
        prod = np.where(self.model.step_mask() & (self.dk > 0), self.dk * np.abs(gap), 0.0)
        return float(prod.max()) if prod.size else 0.0


def _node_values(model, obj, name):
    if isinstance(obj, PayoffProcess):
        return obj.values
    arr = np.asarray(obj, dtype=float)
    n = model.n_steps
    if arr.shape != (n + 1, n + 1):
        raise ShapeError(f"{name} must be a (N+1, N+1) node table", field=name, module=MODULE)
    return arr


def solve_rbsde(model: LatticeModel, xi, h, S) -> RBSDESolution:
    """Solve the reflected equation with terminal ``xi``, generator
    ``h(t, value, slope)`` (vectorized over a level) and obstacle ``S``."""
    n = model.n_steps
    obstacle = _node_values(model, S, "S")
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (n + 1,):
        raise ShapeError(f"terminal condition needs {n + 1} values", field="xi", module=MODULE)
    below = xi < obstacle[n, : n + 1]
    if np.any(below):
        j = int(np.argmax(below))
        raise ObstacleViolationError(
            f"terminal value {xi[j]:.6g} lies below the obstacle {obstacle[n, j]:.6g} at node ({n}, {j})",
            field="xi", hint="terminal condition must dominate the obstacle", module=MODULE,
        )
    sq = model.increment
    g = np.full((n + 1, n + 1), np.nan)
    z = np.zeros((n, n))
    dk = np.zeros((n, n))
    g[n, : n + 1] = xi
    for t in range(n - 1, -1, -1):
        k = t + 1
        up, dn = g[t + 1, 1 : k + 1], g[t + 1, :k]
        e = 0.5 * (up + dn)
        zt = (up - dn) / (2.0 * sq)
        g_hat = e + np.asarray(h(t, e, zt), dtype=float) * model.dt
        gt = np.maximum(obstacle[t, :k], g_hat)
        g[t, :k] = gt
        z[t, :k] = zt
        dk[t, :k] = gt - g_hat
    return RBSDESolution(model, g, z, dk, np.array(obstacle, dtype=float))


def zero_generator(t, value, z):
    return np.zeros_like(np.asarray(z, dtype=float))


def conjugate_generator(spec: PenaltySpec):
    """``h(t, y, z) = f~(t, z)``, the generator whose solution is the value."""
    def h(t, value, z):
        return np.asarray(f_conjugate(spec, t, z))
    return h


def generator_for_policy(spec: PenaltySpec, policy: ControlPolicy):
    """``h(t, y, z) = f(t, theta_t) + z theta_t``; Lipschitz in ``z``."""
    def h(t, value, z):
        th = policy.level(t)
        return np.asarray(f_eval(spec, t, th)) + np.asarray(z) * th
    return h


def compare_rbsde(sol: RBSDESolution, sol_prime: RBSDESolution, tol: float = 1e-10):
    """Check ``G <= G'`` everywhere; returns (holds, smallest ``G' - G``)."""
    if sol.model != sol_prime.model:
        raise ShapeError("solutions live on different lattices", module=MODULE)
    diff = sol_prime.gamma - sol.gamma
    margin = float(np.nanmin(diff))
    return margin >= -tol, margin


def bmo_norm(model: LatticeModel, process) -> float:
    """``max`` over nodes of ``sqrt(E[sum_{s >= t} Z_s^2 dt | node])``."""
    z = np.asarray(process, dtype=float)
    n = model.n_steps
    if z.shape != (n, n):
        raise ShapeError("slope table must be (N, N)", field="process", module=MODULE)
    acc = np.zeros(n + 1)
    best = 0.0
    for t in range(n - 1, -1, -1):
        k = t + 1
        acc = z[t, :k] ** 2 * model.dt + 0.5 * (acc[1 : k + 1] + acc[:k])
        best = max(best, float(acc.max()))
    return math.sqrt(best)


def bmo_bound(spec: PenaltySpec, gamma_sup: float, horizon: float) -> float:
    """``exp(4 kappa |G|_inf) (1 / (4 kappa^2) + T)^(1/2)`` with
    ``kappa = (1+eps)/(4 eps) v (|Ups|^2 + ell)``."""
    kappa = max((1.0 + spec.eps) / (4.0 * spec.eps), spec.upsilon_bound ** 2 + spec.ell)
    return math.exp(4.0 * kappa * gamma_sup) * math.sqrt(1.0 / (4.0 * kappa ** 2) + horizon)


@dataclass(frozen=True, eq=False)
class SaddleCertificate:
    theta_star: ControlPolicy
    sigma_star: StoppingRule
    q_star_density: MeasureDensity
    condition_margins: dict
    saddle_margins: dict
    value: float
    solution: RBSDESolution
    clipped: int
    clip_fraction: float
    deviations: dict = field(default_factory=dict)
    scale: float = 1.0

    @property
    def threshold(self) -> float:
        return -1e-9 * self.scale

    @property
    def passed(self) -> bool:
        margins = list(self.condition_margins.values()) + list(self.saddle_margins.values())
        return all(m >= self.threshold for m in margins)

    def with_theta(self, policy: ControlPolicy) -> "SaddleCertificate":
        return replace(self, theta_star=policy,
                       q_star_density=density_process(policy.model, policy))

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "passed": self.passed,
            "threshold": self.threshold,
            "condition_margins": dict(self.condition_margins),
            "saddle_margins": dict(self.saddle_margins),
            "clipped_nodes": self.clipped,
            "clip_fraction": self.clip_fraction,
            "deviations": dict(self.deviations),
        }


def default_grid(model: LatticeModel, spec: PenaltySpec, points: int = 9) -> ThetaGrid:
    """Symmetric deviation grid reaching ``min(2, 0.9 / sqrt(dt))``."""
    top = min(2.0, 0.9 / math.sqrt(model.dt))
    vals = np.linspace(-top, top, points)
    k = max(top, max(float(np.max(f_eval(spec, t, vals))) for t in range(model.n_steps)))
    return ThetaGrid(tuple(float(v) for v in vals), k)


def _batch_values(model, payoff, costs, q_up, q_dn, decision):
    """Strategy values at the root for a batch of policies.

    ``costs``, ``q_up``, ``q_dn`` are ``(P, N, N)``; returns ``(P,)``.
    """
    n = model.n_steps
    w = np.broadcast_to(payoff[n, : n + 1], (costs.shape[0], n + 1)).copy()
    for t in range(n - 1, -1, -1):
        k = t + 1
        cont = costs[:, t, :k] + q_up[:, t, :k] * w[:, 1 : k + 1] + q_dn[:, t, :k] * w[:, :k]
        w = np.where(decision[t, :k], payoff[t, :k], cont)
    return w[:, 0]


def _policy_deviations(model, spec, grid, rng):
    n = model.n_steps
    steps = n * (n + 1) // 2
    th = grid.array()
    total = th.size ** steps
    idx = np.tril_indices(n)
    if total <= EXHAUSTIVE_POLICY_CAP:
        combos = np.array(list(itertools.product(range(th.size), repeat=steps)), dtype=np.intp)
        mode = "exhaustive"
    else:
        combos = rng.integers(0, th.size, size=(SAMPLED_DEVIATIONS, steps))
        mode = "sampled"
    thetas = np.zeros((combos.shape[0], n, n))
    thetas[:, idx[0], idx[1]] = th[combos]
    return thetas, mode, int(combos.shape[0])


def _stop_deviations(model, rng):
    n = model.n_steps
    if n <= EXHAUSTIVE_RULE_STEPS:
        return list(all_region_rules(model, 0)), "exhaustive"
    rules = []
    for _ in range(SAMPLED_DEVIATIONS):
        region = rng.random((n + 1, n + 1)) < rng.uniform(0.05, 0.6)
        rules.append(first_hitting_rule(model, region, 0))
    return rules, "sampled"


def extract_saddle(model: LatticeModel, Y: PayoffProcess, spec: PenaltySpec,
                   grid: ThetaGrid | None = None, stop_deviations=None,
                   policy_deviations=None, max_clip_fraction: float = 0.05,
                   seed: int = 0) -> SaddleCertificate:
    """Build ``(theta*, sigma*)`` from the value equation and certify it.

    ``theta*_t = z*(t, Z_t)`` with ``Z`` the slope of the solution, clipped
    into the admissible tilt range; ``sigma*`` is the first hit of
    ``{G = Y}``. Margins are slacks (negative means violated):

    * ``i``: ``Y = R^{Q*}`` on the stop region of ``sigma*``;
    * ``ii``: ``E_Q[V^Q(sigma*)] - V(0)`` over the tested policies;
    * ``iii``: ``V^{Q*}`` equals the conditional expectation of ``V^{Q*}(sigma*)``
      at every node before ``sigma*``;
    * ``left`` / ``right``: the two saddle inequalities against the stopping
      and policy deviations. Both also include the exact best deviation found
      by dynamic programming.
    """
    rng = np.random.default_rng(seed)
    n = model.n_steps
    tol = tol_hit(Y)
    scale = max(1.0, Y.sup_norm())
    sol = solve_rbsde(model, Y.terminal, conjugate_generator(spec), Y)

    limit = max_tilt(model.dt)
    raw = np.zeros((n, n))
    for t in range(n):
        raw[t, : t + 1] = z_star(spec, t, sol.z[t, : t + 1])
    clipped_mask = model.step_mask() & (np.abs(raw) > limit)
    clipped = int(clipped_mask.sum())
    frac = clipped / (n * (n + 1) / 2)
    if frac > max_clip_fraction:
        raise LatticeTooCoarseError(
            f"{clipped} of {n * (n + 1) // 2} optimal tilts ({frac:.1%}) exceed the admissible "
            f"range |theta| <= {limit:.4g}",
            field="lattice.dt", hint="use a smaller dt (more steps over the same horizon)",
            module=MODULE,
        )
    theta = ControlPolicy(model, np.clip(raw, -limit, limit), 0)
    sigma = first_hitting_rule(model, np.abs(sol.gamma - Y.values) <= tol, 0)
    density = density_process(model, theta)
    grid = default_grid(model, spec) if grid is None else grid

    cond = {}
    snell = snell_envelope(model, Y, spec, theta, 0)
    on_stop = sigma.decision & model.node_mask()
    cond["i"] = -float(np.max(np.abs(snell.r - Y.values)[on_stop]))

    v_table = sol.gamma
    base_table = _backward_fixed(model, v_table, spec, theta, sigma)
    cond["iii"] = -float(np.nanmax(np.abs(base_table - v_table)))

    if policy_deviations is None:
        thetas, pol_mode, pol_count = _policy_deviations(model, spec, grid, rng)
    else:
        thetas = np.stack([p.theta for p in policy_deviations])
        pol_mode, pol_count = "supplied", len(policy_deviations)
    costs = np.stack([np.stack([np.asarray(f_eval(spec, t, th[t])) * model.dt
                                for t in range(n)]) for th in thetas])
    q_up = 0.5 * (1.0 + thetas * model.increment)
    q_dn = 0.5 * (1.0 - thetas * model.increment)
    dev_v = _batch_values(model, v_table, costs, q_up, q_dn, sigma.decision)
    dp_v, _ = worst_case_response(model, v_table, spec, grid, sigma, 0)
    cond["ii"] = float(min(dev_v.min(), dp_v[0, 0]) - v_table[0, 0])

    y_tab = Y.values
    base = float(_backward_fixed(model, y_tab, spec, theta, sigma)[0, 0])
    dev_y = _batch_values(model, y_tab, costs, q_up, q_dn, sigma.decision)
    dp_y, _ = worst_case_response(model, Y, spec, grid, sigma, 0)
    right = float(min(dev_y.min(), dp_y[0, 0]) - base)

    rules, rule_mode = ((stop_deviations, "supplied") if stop_deviations is not None
                        else _stop_deviations(model, rng))
    left_vals = [float(_backward_fixed(model, y_tab, spec, theta, rule)[0, 0]) for rule in rules]
    left_vals.append(float(snell.r[0, 0]))
    left = base - max(left_vals)

    return SaddleCertificate(
        theta_star=theta,
        sigma_star=sigma,
        q_star_density=density,
        condition_margins=cond,
        saddle_margins={"left": left, "right": right},
        value=float(sol.gamma[0, 0]),
        solution=sol,
        clipped=clipped,
        clip_fraction=frac,
        deviations={"stopping": rule_mode, "stopping_count": len(rules),
                    "policy": pol_mode, "policy_count": pol_count},
        scale=scale,
    )

