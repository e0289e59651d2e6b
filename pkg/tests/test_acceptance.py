"""Acceptance suite: one function per criterion, each returning (passed, detail).

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import entropic_recursion, random_payoff, textbook_snell, textbook_stop_level  # noqa: E402
from robust_stopper.errors import LatticeTooCoarseError  # noqa: E402
from robust_stopper.lattice import (  # noqa: E402
    LatticeModel,
    all_region_rules,
    deterministic_rule,
    first_hitting_rule,
    payoff_from_function,
    payoff_from_table,
)
from robust_stopper.measures import ControlPolicy, max_tilt, paste  # noqa: E402
from robust_stopper.oracle import (  # noqa: E402
    FullTree,
    _sweep,
    enumerate_game,
    lift_rule,
    verify_minimax,
    verify_saddle_exhaustive,
)
from robust_stopper.penalty import PenaltySpec  # noqa: E402
from robust_stopper.rbsde import (  # noqa: E402
    bmo_bound,
    bmo_norm,
    compare_rbsde,
    conjugate_generator,
    extract_saddle,
    generator_for_policy,
    solve_rbsde,
)
from robust_stopper.stopping import (  # noqa: E402
    ThetaGrid,
    evaluate_rho,
    robust_value_exact,
    robust_value_grid,
    snell_envelope,
    tau_V,
    tol_hit,
)

GRID5 = (-0.9, -0.45, 0.0, 0.45, 0.9)
TOL = 1e-10


def _all_paths(n):
    for k in range(2 ** n):
        yield tuple((k >> i) & 1 for i in range(n))


def _random_spec(rng, i):
    if i % 2 == 0:
        return PenaltySpec.entropic(float(rng.uniform(0.5, 3.0)))
    return PenaltySpec.power(float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.0, 1.0)),
                             float(rng.uniform(-0.3, 0.3)))


def _random_policy(model, rng, scale=0.8):
    th = rng.uniform(-scale, scale, (model.n_steps,) * 2) * max_tilt(model.dt)
    return ControlPolicy(model, th)


def criterion_1(seed=101):
    """Minimax equality against the exhaustive oracle."""
    rng = np.random.default_rng(seed)
    m = LatticeModel(3, 1 / 3)
    grid = ThetaGrid(GRID5, 0.9)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        spec = PenaltySpec.entropic(float(rng.choice([0.5, 1.0, 2.0])))
        Y = random_payoff(m, rng)
        tree = FullTree.from_payoff(Y)
        game = enumerate_game(tree, spec, grid)
        dp = robust_value_grid(m, Y, spec, grid).root()
        rep = verify_minimax(game, tree, spec, 0, dp)
        worst = max(worst, rep["duality_gap"], rep["dp_gap"])
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 30.0
    return ok, f"max gap {worst:.2e} over 50 instances, {elapsed:.2f}s"


def criterion_2():
    """Value equals the reflected backward equation with the conjugate generator."""
    m = LatticeModel(50, 0.02)
    Y = payoff_from_function(m, lambda t, x: max(1.0 - math.exp(0.6 * x), 0.0) + 0.2 * t, 1.2)
    start = time.perf_counter()
    worst = 0.0
    for spec in (PenaltySpec.entropic(1.0), PenaltySpec.power(1.0, 0.5, 0.2)):
        vs = robust_value_exact(m, Y, spec)
        sol = solve_rbsde(m, Y.terminal, conjugate_generator(spec), Y)
        mask = m.node_mask()
        worst = max(worst, float(np.max(np.abs(vs.v[mask] - sol.gamma[mask]))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 1.0
    return ok, f"max node gap {worst:.2e}, {elapsed:.2f}s"


def criterion_3():
    """Gap to the direct entropic recursion shrinks at order about one in dt."""
    r = 1.0
    spec = PenaltySpec.entropic(r)
    start = time.perf_counter()
    dts, gaps = [], []
    for n in (25, 50, 100, 200):
        m = LatticeModel(n, 1.0 / n)
        Y = payoff_from_function(m, lambda t, x: max(1.0 - math.exp(0.5 * x), 0.0), 1.0)
        gaps.append(abs(robust_value_exact(m, Y, spec).root() - entropic_recursion(m, Y, r)))
        dts.append(m.dt)
    slope = float(np.polyfit(np.log(dts), np.log(gaps), 1)[0])
    elapsed = time.perf_counter() - start
    ok = slope >= 0.9 and all(b < a for a, b in zip(gaps, gaps[1:])) and elapsed < 5.0
    return ok, f"slope {slope:.3f}, gaps {', '.join(f'{g:.2e}' for g in gaps)}, {elapsed:.2f}s"


def criterion_4(seed=7):
    """Saddle certificates verified exhaustively, plus the zeroed-tilt control."""
    rng = np.random.default_rng(seed)
    m = LatticeModel(3, 1 / 3)
    certified = flagged = tried = 0
    worst = math.inf
    while certified < 20:
        tried += 1
        r = (1.25, 2.0)[certified % 2]
        spec = PenaltySpec.entropic(r)
        grid = ThetaGrid((-0.9, -0.3, -0.1, 0.1, 0.3, 0.9), max(0.9, 0.405 * r))
        Y = random_payoff(m, rng)
        try:
            cert = extract_saddle(m, Y, spec, grid=grid, seed=seed)
        except LatticeTooCoarseError:
            continue
        # a stop at the root leaves the tilt nothing to act on
        if cert.sigma_star.decision[0, 0]:
            continue
        tree = FullTree.from_payoff(Y)
        game = enumerate_game(tree, spec, grid)
        rep = verify_saddle_exhaustive(cert, game, tree, spec)
        margins = list(cert.condition_margins.values()) + [rep["left_slack"], rep["right_slack"]]
        worst = min(worst, min(margins))
        if not (cert.passed and rep["passed"] and min(margins) >= -1e-9):
            return False, f"instance {certified} failed: {rep}"
        bad = verify_saddle_exhaustive(cert.with_theta(ControlPolicy.zero(m)), game, tree, spec)
        flagged += not bad["passed"]
        certified += 1
    ok = flagged >= 15
    return ok, (f"20/20 certified (min slack {worst:.2e}, {tried} draws), "
                f"negative control flagged {flagged}/20")


def criterion_5(seed=5):
    """The zero grid reproduces the textbook Snell envelope and hitting time."""
    rng = np.random.default_rng(seed)
    spec = PenaltySpec.entropic(1.0)
    g0 = ThetaGrid((0.0,), 0.0)
    worst_v, stop_mismatch = 0.0, 0
    for i in range(20):
        n = int(rng.integers(1, 9))
        m = LatticeModel(n, 1.0 / n)
        Y = random_payoff(m, rng)
        vs = robust_value_grid(m, Y, spec, g0)
        levels = [list(Y.values[t, : t + 1]) for t in range(n + 1)]
        env = textbook_snell(levels)
        for t in range(n + 1):
            worst_v = max(worst_v, max(abs(a - b) for a, b in zip(vs.v[t, : t + 1], env[t])))
        rule = tau_V(m, vs, Y)
        tol = tol_hit(Y)
        for p in _all_paths(n):
            stop_mismatch += rule.stop_level(p) != textbook_stop_level(levels, env, p, tol)
    ok = worst_v <= 1e-12 and stop_mismatch == 0
    return ok, f"max envelope gap {worst_v:.2e}, {stop_mismatch} hitting-time mismatches"


def _rho_rule(model, rng, nu):
    if rng.random() < 0.5:
        return deterministic_rule(model, int(rng.integers(nu, model.n_steps + 1)))
    return first_hitting_rule(model, rng.random((model.n_steps + 1,) * 2) < 0.4, floor=nu)


def criterion_6(seed=6):
    """Monotonicity, translation invariance, convexity and normalization of rho."""
    rng = np.random.default_rng(seed)
    m = LatticeModel(3, 1 / 3)
    grid = ThetaGrid(GRID5, 0.9)
    worst = {"monotone": 0.0, "translation": 0.0, "convex": 0.0, "normalized": 0.0}
    zero = np.zeros((4, 4))
    for i in range(100):
        spec = PenaltySpec.entropic(float(rng.choice([0.5, 1.0, 2.0])))
        nu = int(rng.integers(0, 3))
        gamma = _rho_rule(m, rng, nu)
        xi = random_payoff(m, rng).values
        eta = random_payoff(m, rng).values
        lam = float(rng.random())
        c = float(rng.uniform(-1, 1))
        rho = lambda x: evaluate_rho(m, spec, grid, nu, gamma, x)  # noqa: E731
        r_xi, r_eta = rho(xi), rho(eta)
        lower = xi - np.abs(eta)
        worst["monotone"] = max(worst["monotone"], float(np.max(r_xi - rho(lower))))
        worst["translation"] = max(worst["translation"],
                                   float(np.max(np.abs(rho(xi + c) - (r_xi - c)))))
        if gamma.decision[nu, : nu + 1].all():
            # a stop at nu allows a different constant on every level-nu node
            shift = np.zeros((4, 4))
            shift[nu, : nu + 1] = rng.uniform(-1, 1, nu + 1)
            diff = rho(xi + shift) - (r_xi - shift[nu, : nu + 1])
            worst["translation"] = max(worst["translation"], float(np.max(np.abs(diff))))
        mix = rho(lam * xi + (1 - lam) * eta)
        worst["convex"] = max(worst["convex"], float(np.max(mix - lam * r_xi - (1 - lam) * r_eta)))
        worst["normalized"] = max(worst["normalized"], float(np.max(np.abs(rho(zero)))))
    ok = all(v <= TOL for v in worst.values())
    return ok, "worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def criterion_7(seed=8):
    """Flat-off on the reflection and comparison against fixed-policy generators."""
    rng = np.random.default_rng(seed)
    flat_bad = pushes = 0
    comp_worst = math.inf
    for i in range(50):
        n = int(rng.integers(2, 31))
        m = LatticeModel(n, 1.0 / n)
        Y = random_payoff(m, rng)
        spec = _random_spec(rng, i)
        sol = solve_rbsde(m, Y.terminal, conjugate_generator(spec), Y)
        tol = tol_hit(Y)
        steps = m.step_mask()
        touched = np.abs(sol.gamma[:n, :n] - Y.values[:n, :n]) <= tol
        pushed = steps & (sol.dk > 0)
        flat_bad += int(np.sum(pushed & ~touched))
        pushes += int(np.sum(pushed))
        for _ in range(5):
            pol = _random_policy(m, rng)
            other = solve_rbsde(m, Y.terminal, generator_for_policy(spec, pol), Y)
            ok, margin = compare_rbsde(sol, other, tol=TOL)
            comp_worst = min(comp_worst, margin)
    ok = flat_bad == 0 and comp_worst >= -TOL
    return ok, (f"{flat_bad} of {pushes} reflection pushes off the obstacle, "
                f"min comparison margin {comp_worst:.2e}")


def criterion_8(seed=9):
    """BMO norm of the control stays under the a-priori bound."""
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for i in range(20):
        n = int(rng.integers(2, 41))
        m = LatticeModel(n, 1.0 / n)
        Y = random_payoff(m, rng)
        spec = _random_spec(rng, i)
        sol = solve_rbsde(m, Y.terminal, conjugate_generator(spec), Y)
        g_sup = float(np.max(np.abs(sol.gamma[m.node_mask()])))
        bound = bmo_bound(spec, g_sup, m.horizon)
        worst_ratio = max(worst_ratio, bmo_norm(m, sol.z) / bound)
    return worst_ratio <= 1.0, f"max norm/bound ratio {worst_ratio:.3f}"


def _submartingale_margin(m, Y, spec, grid):
    vs = robust_value_grid(m, Y, spec, grid)
    tau = tau_V(m, vs, Y)
    V = payoff_from_table(m, vs.v)
    tree = FullTree.from_payoff(V)
    game = enumerate_game(tree, spec, grid)
    paths = list(_all_paths(m.n_steps))
    tau_levels = [tau.stop_level(p) for p in paths]
    stops, conts = [], []
    for rule in all_region_rules(m):
        if all(rule.stop_level(p) <= s for p, s in zip(paths, tau_levels)):
            s, c = lift_rule(tree, rule)
            stops.append(s)
            conts.append(c)
    # inf over every grid policy on the full tree, per rule
    rule_min = _sweep(tree, spec, game, 0, np.array(stops), np.array(conts))[0]
    return float(np.min(rule_min) - vs.root())


def criterion_9(seed=10):
    """Stopping identity, submartingale property, pasting and grid monotonicity."""
    rng = np.random.default_rng(seed)
    m = LatticeModel(3, 1 / 3)
    spec = PenaltySpec.entropic(1.0)
    grid = ThetaGrid(GRID5, 0.9)
    nested = [ThetaGrid((0.0,), 0.0), ThetaGrid((-0.45, 0.0, 0.45), 0.45), grid,
              ThetaGrid(tuple(np.round(np.linspace(-0.9, 0.9, 13), 2)), 0.9)]
    stop_gap = paste_gap = mono_bad = 0.0
    sub_margin = math.inf
    for _ in range(20):
        Y = random_payoff(m, rng)
        vs = robust_value_grid(m, Y, spec, grid)
        tau = tau_V(m, vs, Y)
        mask = tau.decision & m.node_mask()
        stop_gap = max(stop_gap, float(np.max(np.abs(vs.v[mask] - Y.values[mask]))))
        sub_margin = min(sub_margin, _submartingale_margin(m, Y, spec, grid))
        level = int(rng.integers(0, 4))
        a, b = _random_policy(m, rng), _random_policy(m, rng)
        pasted = paste(a, b, deterministic_rule(m, level))
        sigma = first_hitting_rule(m, rng.random((4, 4)) < 0.5, floor=level)
        s_p = snell_envelope(m, Y, spec, pasted).r
        s_b = snell_envelope(m, Y, spec, b).r
        at = sigma.decision & m.node_mask()
        paste_gap = max(paste_gap, float(np.max(np.abs(s_p[at] - s_b[at]))))
        values = [robust_value_grid(m, Y, spec, g).v for g in nested]
        for hi, lo in zip(values, values[1:]):
            mono_bad = max(mono_bad, float(np.max((lo - hi)[m.node_mask()])))
    ok = stop_gap <= TOL and sub_margin >= -TOL and paste_gap == 0.0 and mono_bad <= TOL
    return ok, (f"V(tau)-Y {stop_gap:.1e}, submartingale margin {sub_margin:.1e}, "
                f"pasting gap {paste_gap:.1e}, grid monotonicity excess {mono_bad:.1e}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9]
RESULTS = []


def _line(k, ok, detail):
    return f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}"


@pytest.mark.parametrize("k", range(1, len(CRITERIA) + 1))
def test_criterion(k):
    ok, detail = CRITERIA[k - 1]()
    line = _line(k, ok, detail)
    RESULTS.append(line)
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for k, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        failed += not ok
        print(_line(k, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
