"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Two workloads: the grid backward induction on a large lattice, and the
exhaustive policy sweep used by the game oracle on a depth-3 tree.
"""

import argparse
import time

import numpy as np

from robust_stopper import kernels
from robust_stopper.lattice import LatticeModel, payoff_from_function
from robust_stopper.measures import tilt_probabilities
from robust_stopper.oracle import FullTree, _local_cost, enumerate_game
from robust_stopper.penalty import PenaltySpec
from robust_stopper.stopping import ThetaGrid, _stop_modes


def grid_case(n_steps=2000, points=9):
    model = LatticeModel(n_steps, 1.0 / n_steps)
    Y = payoff_from_function(model, lambda t, x: max(1.0 - np.exp(0.4 * x), 0.0), 1.0)
    spec = PenaltySpec.entropic(1.0)
    grid = ThetaGrid.for_bound(model, spec, 1.0, points)
    q_up, q_dn = tilt_probabilities(grid.array(), model.dt)
    args = (Y.values, grid.cost_table(model, spec), np.atleast_1d(q_up), np.atleast_1d(q_dn),
            _stop_modes(model, 0), 0)
    return f"grid_backward N={n_steps}, {grid.size} tilts", \
        lambda b: kernels.grid_backward(*args, backend=b)


def oracle_case(points=7):
    model = LatticeModel(3, 1 / 3)
    Y = payoff_from_function(model, lambda t, x: float(np.sin(3 * x + t)), 1.0)
    spec = PenaltySpec.entropic(1.0)
    grid = ThetaGrid(tuple(np.linspace(-0.9, 0.9, points)), 0.9)
    tree = FullTree.from_payoff(Y)
    game = enumerate_game(tree, spec, grid)
    q_up, q_dn = tilt_probabilities(grid.array(), tree.dt)
    cost = _local_cost(tree, spec, game, 0)
    return (f"oracle_extrema depth 3, {game.policy_count} policies x {game.rule_count} rules",
            lambda b: kernels.oracle_extrema(game.stop, game.cont, tree.payoff, q_up, q_dn, cost,
                                             game.policy_count, backend=b, threads=1))


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    for label, run in (grid_case(), oracle_case()):
        timings = {b: best_time(lambda: run(b), args.repeat) for b in backends}
        parts = [f"{b} {t * 1e3:9.2f} ms" for b, t in timings.items()]
        if "cython" in timings:
            parts.append(f"speedup {timings['python'] / timings['cython']:.1f}x")
        print(f"{label}: " + ", ".join(parts))


if __name__ == "__main__":
    main()
