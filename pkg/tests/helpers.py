"""Shared instance generators and independent reference implementations."""

import math

import numpy as np

from robust_stopper.lattice import LatticeModel, payoff_from_table


def random_payoff(model: LatticeModel, rng, scale=1.0):
    values = np.where(model.node_mask(),
                      rng.uniform(-scale, scale, (model.n_steps + 1,) * 2), np.nan)
    return payoff_from_table(model, values, scale)


def n1_example():
    """One step of length 1 with payoff 0 at the root and on the down node, 1 up."""
    model = LatticeModel(1, 1.0)
    Y = payoff_from_table(model, [[0.0, np.nan], [0.0, 1.0]])
    return model, Y


def textbook_snell(levels):
    """Classical Snell envelope with fair coin flips, written with plain lists.

    ``levels[t]`` lists the payoffs at time ``t`` from the lowest state up.
    Returns the envelope levels and the first time the envelope meets the
    payoff along each terminal path, keyed by the tuple of moves.
    """
    n = len(levels) - 1
    env = [None] * (n + 1)
    env[n] = list(levels[n])
    for t in range(n - 1, -1, -1):
        env[t] = []
        for j in range(t + 1):
            cont = 0.5 * env[t + 1][j] + 0.5 * env[t + 1][j + 1]
            env[t].append(max(levels[t][j], cont))
    return env


def textbook_stop_level(levels, env, moves, tol):
    j = 0
    for t in range(len(levels)):
        if abs(env[t][j] - levels[t][j]) <= tol:
            return t
        j += moves[t]
    return len(levels) - 1


def entropic_recursion(model, Y, r):
    """``V_t = max(Y_t, -r log E[exp(-V_{t+1} / r)])`` under fair coin flips."""
    n = model.n_steps
    v = list(Y.values[n, : n + 1])
    for t in range(n - 1, -1, -1):
        nxt = []
        for j in range(t + 1):
            a, b = -v[j + 1] / r, -v[j] / r
            m = max(a, b)
            ce = -r * (m + math.log(0.5 * math.exp(a - m) + 0.5 * math.exp(b - m)))
            nxt.append(max(Y.values[t, j], ce))
        v = nxt
    return v[0]


def all_paths(n):
    for k in range(2 ** n):
        yield tuple((k >> i) & 1 for i in range(n))
