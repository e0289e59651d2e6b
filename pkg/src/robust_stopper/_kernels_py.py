"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Both backends share signatures and tie-breaking: the first grid index (or
policy index) attaining a minimum wins.
"""

import numpy as np

CHUNK = 1 << 15


def grid_backward(payoff, fcost, qup, qdn, mode, nu):
    """Backward induction ``V = max(Y, min_k fcost + qup V_up + qdn V_down)``.

    ``mode`` per node: 0 continue only, 1 stop optional, 2 stop forced; the
    terminal level always stops. Levels below ``nu`` use grid index 0 only.
    Returns the value table and the minimizing grid index per step node.
    """
    n = payoff.shape[0] - 1
    v = np.full((n + 1, n + 1), np.nan)
    arg = np.zeros((n, n), dtype=np.intp)
    v[n, : n + 1] = payoff[n, : n + 1]
    for t in range(n - 1, -1, -1):
        k = t + 1
        up = v[t + 1, 1 : k + 1]
        dn = v[t + 1, :k]
        g = 1 if t < nu else qup.shape[0]
        cont = fcost[t, None, :g] + qup[None, :g] * up[:, None] + qdn[None, :g] * dn[:, None]
        best = np.argmin(cont, axis=1)
        cval = cont[np.arange(k), best]
        m = mode[t, :k]
        y = payoff[t, :k]
        row = np.where(m == 2, y, np.where(m == 1, np.maximum(y, cval), cval))
        v[t, :k] = row
        arg[t, :k] = np.where(m == 2, 0, best)
    return v, arg


def _decode(start, count, n_internal, g):
    idx = np.arange(start, start + count, dtype=np.int64)
    digits = np.empty((count, n_internal), dtype=np.intp)
    for i in range(n_internal):
        digits[:, i] = idx % g
        idx //= g
    return digits


def oracle_extrema(stop, cont, payoff, qup, qdn, fcost, start, end):
    """Exhaustive payoffs ``E_Q[Y_rule + sum f dt]`` over policies ``[start, end)``.

    Policies are history-indexed: internal heap node ``i`` uses grid index
    ``(p // g**i) % g``; node ``i`` has children ``2i+1`` (down) and ``2i+2``
    (up). Returns per-rule minimum and its policy, and the minimum over
    policies of the per-policy maximum with its policy.
    """
    n_rules = stop.shape[0]
    n_internal, g = fcost.shape
    m = payoff.shape[0]
    stop_f = stop.astype(float)
    cont_f = cont.astype(float)
    rule_min = np.full(n_rules, np.inf)
    rule_arg = np.full(n_rules, -1, dtype=np.int64)
    upper, upper_arg = np.inf, -1
    nodes = np.arange(n_internal)
    for lo in range(start, end, CHUNK):
        count = min(CHUNK, end - lo)
        d = _decode(lo, count, n_internal, g)
        prob = np.empty((count, m))
        prob[:, 0] = 1.0
        for i in range(n_internal):
            prob[:, 2 * i + 1] = prob[:, i] * qdn[d[:, i]]
            prob[:, 2 * i + 2] = prob[:, i] * qup[d[:, i]]
        cost = fcost[nodes[None, :], d]
        vals = (prob * payoff[None, :]) @ stop_f.T + (prob[:, :n_internal] * cost) @ cont_f.T
        best = np.argmin(vals, axis=0)
        bval = vals[best, np.arange(n_rules)]
        better = bval < rule_min
        rule_min = np.where(better, bval, rule_min)
        rule_arg = np.where(better, best + lo, rule_arg)
        pmax = vals.max(axis=1)
        b = int(np.argmin(pmax))
        if pmax[b] < upper:
            upper, upper_arg = float(pmax[b]), lo + b
    return rule_min, rule_arg, upper, upper_arg
