"""Brute-force ground truth on small full binary trees.

History nodes use heap numbering: the root is 0 and node ``i`` has its down
child at ``2i + 1`` and its up child at ``2i + 2``. Stopping rules and tilt
policies are indexed by history, which is more general than the Markov
objects used on the recombining lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BudgetError, ParameterError, ShapeError
from .lattice import LatticeModel, PayoffProcess, StoppingRule
from .measures import ControlPolicy, tilt_probabilities
from .penalty import PenaltySpec, f_eval
from .stopping import ThetaGrid

MODULE = "oracle"
MAX_STEPS = 5
DEFAULT_CAP = 10 ** 7
GAP_TOL = 1e-10


def _depths_ups(n_steps: int):
    size = 2 ** (n_steps + 1) - 1
    depth = np.zeros(size, dtype=np.intp)
    ups = np.zeros(size, dtype=np.intp)
    for i in range(1, size):
        parent = (i - 1) // 2
        depth[i] = depth[parent] + 1
        ups[i] = ups[parent] + (1 if i % 2 == 0 else 0)
    return depth, ups


@dataclass(frozen=True, eq=False)
class FullTree:
    """Payoff on every history of a depth-``n_steps`` binary tree."""

    n_steps: int
    dt: float
    payoff: np.ndarray

    def __post_init__(self):
        n = int(self.n_steps)
        if not 1 <= n <= MAX_STEPS:
            raise ParameterError(f"full trees support 1 <= N <= {MAX_STEPS}, got {n}",
                                 field="n_steps", module=MODULE)
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ParameterError("dt must be positive", field="dt", module=MODULE)
        pay = np.array(self.payoff, dtype=float).reshape(-1)
        if pay.shape != (2 ** (n + 1) - 1,) or not np.all(np.isfinite(pay)):
            raise ShapeError(f"payoff needs {2 ** (n + 1) - 1} finite history values",
                             field="payoff", module=MODULE)
        pay.setflags(write=False)
        depth, ups = _depths_ups(n)
        object.__setattr__(self, "n_steps", n)
        object.__setattr__(self, "payoff", pay)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "ups", ups)

    @classmethod
    def from_payoff(cls, Y: PayoffProcess) -> "FullTree":
        n = Y.model.n_steps
        if n > MAX_STEPS:
            raise ParameterError(f"full trees support N <= {MAX_STEPS}, got {n}",
                                 field="n_steps", module=MODULE)
        depth, ups = _depths_ups(n)
        return cls(n, Y.model.dt, Y.values[depth, ups])

    @property
    def size(self) -> int:
        return self.payoff.size

    def level_nodes(self, t: int) -> np.ndarray:
        return np.arange(2 ** t - 1, 2 ** (t + 1) - 1)

    def subtree(self, root: int) -> np.ndarray:
        """History indices below ``root`` in local heap order."""
        out = [root]
        frontier = [root]
        for _ in range(self.n_steps - int(self.depth[root])):
            frontier = [c for i in frontier for c in (2 * i + 1, 2 * i + 2)]
            out.extend(frontier)
        return np.asarray(out, dtype=np.intp)


def rule_count(n: int) -> int:
    c = 1
    for _ in range(n):
        c = 1 + c * c
    return c


def _enumerate_rules(n: int):
    """All stopping rules on a depth-``n`` tree as (stop, cont) masks."""
    size = 2 ** (n + 1) - 1
    n_int = 2 ** n - 1

    def rec(i):
        # each entry is a pair of node-index tuples (stopped here, continued here)
        if i >= n_int:
            return [((i,), ())]
        left, right = rec(2 * i + 1), rec(2 * i + 2)
        out = [((i,), ())]
        for ls, lc in left:
            for rs, rc in right:
                out.append((ls + rs, (i,) + lc + rc))
        return out

    rules = rec(0)
    stop = np.zeros((len(rules), size), dtype=np.uint8)
    cont = np.zeros((len(rules), max(n_int, 1)), dtype=np.uint8)
    for r, (s, c) in enumerate(rules):
        stop[r, list(s)] = 1
        if c:
            cont[r, list(c)] = 1
    return stop, cont[:, :n_int]


@dataclass(frozen=True, eq=False)
class EnumeratedGame:
    """Every stopping rule and every grid policy on the subtrees below level ``nu``.

    All subtrees share the same shape, so the masks are stored once in local
    heap order; ``roots`` lists the level-``nu`` history nodes.
    """

    depth: int
    nu: int
    grid: ThetaGrid
    stop: np.ndarray
    cont: np.ndarray
    roots: np.ndarray

    @property
    def rule_count(self) -> int:
        return int(self.stop.shape[0])

    @property
    def internal_count(self) -> int:
        return 2 ** self.depth - 1

    @property
    def policy_count(self) -> int:
        return self.grid.size ** self.internal_count

    def policy_digits(self, index: int) -> np.ndarray:
        g = self.grid.size
        return np.array([(index // g ** i) % g for i in range(self.internal_count)],
                        dtype=np.intp)


def enumerate_game(tree: FullTree, spec: PenaltySpec, grid: ThetaGrid, nu: int = 0,
                   cap: int = DEFAULT_CAP) -> EnumeratedGame:
    """Build the exhaustive strategy sets, refusing jobs above the policy cap."""
    if not 0 <= int(nu) < tree.n_steps:
        raise ParameterError(f"nu must lie in [0, {tree.n_steps - 1}]", field="nu", module=MODULE)
    nu = int(nu)
    model = LatticeModel(tree.n_steps, tree.dt)
    grid.validate(model, spec)
    depth = tree.n_steps - nu
    n_pol = grid.size ** (2 ** depth - 1)
    n_rules = rule_count(depth)
    if n_pol > cap:
        raise BudgetError(
            f"{n_pol} policies over {2 ** depth - 1} history nodes with {grid.size} tilts "
            f"exceed the cap of {cap}",
            field="grid", hint="shrink the grid or the horizon, or raise the cap",
            module=MODULE, counts={"policies": n_pol, "rules": n_rules, "cap": cap},
        )
    stop, cont = _enumerate_rules(depth)
    return EnumeratedGame(depth, nu, grid, stop, cont, tree.level_nodes(nu))


def _local_cost(tree, spec, game, root):
    g = game.grid.array()
    nodes = tree.subtree(root)[: game.internal_count]
    rows = [np.asarray(f_eval(spec, int(tree.depth[i]), g)) * tree.dt for i in nodes]
    if not rows:
        return np.zeros((0, g.size))
    return np.stack(rows)


def _sweep(tree, spec, game, root, stop=None, cont=None, backend=None):
    q_up, q_dn = tilt_probabilities(game.grid.array(), tree.dt)
    payoff = tree.payoff[tree.subtree(root)]
    return kernels.oracle_extrema(
        game.stop if stop is None else stop,
        game.cont if cont is None else cont,
        payoff, np.atleast_1d(q_up), np.atleast_1d(q_dn),
        _local_cost(tree, spec, game, root).reshape(game.internal_count, game.grid.size),
        game.policy_count, backend=backend,
    )


def _extrema(game, tree, spec, backend=None):
    lower, upper, best_rule, best_pol = [], [], [], []
    for root in game.roots:
        rule_min, _, up, up_arg = _sweep(tree, spec, game, int(root), backend=backend)
        r = int(np.argmax(rule_min))
        lower.append(float(rule_min[r]))
        upper.append(up)
        best_rule.append(r)
        best_pol.append(up_arg)
    return np.asarray(lower), np.asarray(upper), best_rule, best_pol


def _check_game_nu(game, nu):
    if nu is not None and int(nu) != game.nu:
        raise ParameterError(f"game was enumerated from nu = {game.nu}, not {nu}",
                             field="nu", module=MODULE)


def brute_force_values(game: EnumeratedGame, tree: FullTree, spec: PenaltySpec,
                       nu: int | None = None, backend=None):
    """Lower (sup-inf) and upper (inf-sup) values at each level-``nu`` history node.

    Both are arrays of length ``2**nu`` in heap order of the level.
    """
    _check_game_nu(game, nu)
    lower, upper, _, _ = _extrema(game, tree, spec, backend)
    return lower, upper


def _policy_table(game, index):
    return game.grid.array()[game.policy_digits(index)].tolist()


def verify_minimax(game: EnumeratedGame, tree: FullTree, spec: PenaltySpec, nu, value_from_dp,
                   backend=None) -> dict:
    """Compare the exhaustive lower and upper values with a dynamic-programming
    value (a scalar or one entry per level-``nu`` history node)."""
    _check_game_nu(game, nu)
    lower, upper, w_rules, w_pols = _extrema(game, tree, spec, backend)
    dp = np.broadcast_to(np.asarray(value_from_dp, dtype=float), lower.shape)
    scale = max(1.0, float(np.max(np.abs(tree.payoff)))) + tree.n_steps * tree.dt
    duality = float(np.max(np.abs(upper - lower)))
    dp_gap = float(np.max(np.abs(lower - dp)))
    worst = int(np.argmax(np.abs(lower - dp) + np.abs(upper - lower)))
    return {
        "nu": game.nu,
        "lower": lower.tolist(),
        "upper": upper.tolist(),
        "dp": dp.tolist(),
        "duality_gap": duality,
        "dp_gap": dp_gap,
        "tolerance": GAP_TOL * scale,
        "passed": duality <= GAP_TOL * scale and dp_gap <= GAP_TOL * scale,
        "rule_count": game.rule_count,
        "policy_count": game.policy_count,
        "witness": {
            "history_node": int(game.roots[worst]),
            "max_rule_stops_at": np.flatnonzero(game.stop[w_rules[worst]]).tolist(),
            "min_policy": _policy_table(game, w_pols[worst]),
        },
    }


def lift_policy(tree: FullTree, policy: ControlPolicy) -> np.ndarray:
    """Tilt on each internal history node from a lattice policy."""
    n_int = 2 ** tree.n_steps - 1
    return policy.theta[tree.depth[:n_int], tree.ups[:n_int]].astype(float)


def lift_rule(tree: FullTree, rule: StoppingRule):
    """(stop, cont) masks of a lattice rule on the full tree."""
    n_int = 2 ** tree.n_steps - 1
    stop = np.zeros(tree.size, dtype=np.uint8)
    cont = np.zeros(n_int, dtype=np.uint8)
    frontier = [0]
    while frontier:
        nxt = []
        for i in frontier:
            if rule.decision[tree.depth[i], tree.ups[i]]:
                stop[i] = 1
            else:
                cont[i] = 1
                nxt.extend((2 * i + 1, 2 * i + 2))
        frontier = nxt
    return stop, cont


def _path_probs(tree, theta):
    """Probability of every history under per-node tilts."""
    q_up, q_dn = tilt_probabilities(np.asarray(theta, dtype=float), tree.dt)
    q_up, q_dn = np.atleast_1d(q_up), np.atleast_1d(q_dn)
    prob = np.zeros(tree.size)
    prob[0] = 1.0
    for i in range(q_up.size):
        prob[2 * i + 1] = prob[i] * q_dn[i]
        prob[2 * i + 2] = prob[i] * q_up[i]
    return prob


def _fixed_value(tree, spec, theta, stop, cont):
    prob = _path_probs(tree, theta)
    n_int = cont.shape[-1]
    cost = np.array([float(f_eval(spec, int(tree.depth[i]), theta[i])) * tree.dt
                     for i in range(n_int)])
    return stop @ (prob * tree.payoff) + cont @ (prob[:n_int] * cost)


def verify_saddle_exhaustive(cert, game: EnumeratedGame, tree: FullTree, spec: PenaltySpec,
                             backend=None) -> dict:
    """Check both saddle inequalities against every rule and every grid policy."""
    if game.nu != 0:
        raise ParameterError("saddle verification runs from the root (nu = 0)",
                             field="nu", module=MODULE)
    theta = lift_policy(tree, cert.theta_star)
    s_stop, s_cont = lift_rule(tree, cert.sigma_star)
    base = float(_fixed_value(tree, spec, theta, s_stop, s_cont))
    left_vals = _fixed_value(tree, spec, theta, game.stop, game.cont)
    r_worst = int(np.argmax(left_vals))
    rule_min, rule_arg, _, _ = _sweep(tree, spec, game, 0, s_stop[None, :], s_cont[None, :],
                                      backend=backend)
    left = base - float(left_vals[r_worst])
    right = float(rule_min[0]) - base
    thr = -1e-9 * max(1.0, float(np.max(np.abs(tree.payoff))))
    return {
        "value": base,
        "left_slack": left,
        "right_slack": right,
        "threshold": thr,
        "passed": left >= thr and right >= thr,
        "rule_count": game.rule_count,
        "policy_count": game.policy_count,
        "left_witness": np.flatnonzero(game.stop[r_worst]).tolist(),
        "right_witness": _policy_table(game, int(rule_arg[0])),
    }
