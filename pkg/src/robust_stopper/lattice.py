"""Recombining binomial discretization of a one-dimensional Brownian filtration.

Node ``(t, j)`` sits at time ``t * dt`` with ``j`` up-moves out of ``t``; its
Brownian state is ``(2j - t) * sqrt(dt)``. The up child is ``(t+1, j+1)`` and
the down child ``(t+1, j)``.

Node-indexed tables are ``(N+1, N+1)`` arrays whose entries with ``j > t`` are
unused (NaN for floats, False for booleans). Step tables, which hold one value
per node at levels ``0..N-1`` for the step ``t -> t+1``, are ``(N, N)``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import BoundViolationError, ParameterError

MODULE = "lattice"


@dataclass(frozen=True)
class LatticeModel:
    n_steps: int
    dt: float

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ParameterError(
                f"n_steps must be a positive integer, got {self.n_steps!r}",
                field="n_steps", hint="use n_steps >= 1", module=MODULE,
            )
        if not (self.dt > 0) or not math.isfinite(self.dt):
            raise ParameterError(
                f"dt must be positive and finite, got {self.dt!r}",
                field="dt", hint="use dt > 0", module=MODULE,
            )
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def increment(self) -> float:
        return math.sqrt(self.dt)

    @property
    def node_count(self) -> int:
        n = self.n_steps
        return (n + 1) * (n + 2) // 2

    def state(self, t: int, j: int) -> float:
        return (2 * j - t) * self.increment

    def level_states(self, t: int) -> np.ndarray:
        j = np.arange(t + 1)
        return (2 * j - t) * self.increment

    def states(self) -> np.ndarray:
        """Brownian state at every node, NaN above the diagonal."""
        n = self.n_steps
        t, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        out = (2 * j - t) * self.increment
        return np.where(j <= t, out, np.nan)

    def nodes(self) -> Iterator[tuple[int, int]]:
        for t in range(self.n_steps + 1):
            for j in range(t + 1):
                yield t, j

    def node_mask(self) -> np.ndarray:
        n = self.n_steps
        return np.tri(n + 1, dtype=bool)

    def step_mask(self) -> np.ndarray:
        return np.tri(self.n_steps, dtype=bool)

    def node_of_path(self, path) -> list[tuple[int, int]]:
        """Nodes visited by a sequence of moves (1 = up, 0 = down)."""
        nodes = [(0, 0)]
        j = 0
        for t, move in enumerate(path, start=1):
            j += int(move)
            nodes.append((t, j))
        return nodes


def build_lattice(n_steps: int, dt: float) -> LatticeModel:
    return LatticeModel(n_steps, dt)


def empty_node_table(model: LatticeModel, fill=np.nan, dtype=float) -> np.ndarray:
    n = model.n_steps
    out = np.full((n + 1, n + 1), fill, dtype=dtype)
    return out


def check_node_table(model: LatticeModel, table, name: str, *, steps=False) -> np.ndarray:
    arr = np.asarray(table)
    n = model.n_steps
    shape = (n, n) if steps else (n + 1, n + 1)
    if arr.shape != shape:
        raise ParameterError(
            f"{name} has shape {arr.shape}, expected {shape}",
            field=name, hint="node tables are (N+1, N+1), step tables (N, N)",
            module=MODULE,
        )
    return arr


@dataclass(frozen=True, eq=False)
class PayoffProcess:
    """Bounded reward ``Y`` held on every lattice node."""

    model: LatticeModel
    values: np.ndarray
    bound: float

    def __post_init__(self):
        vals = np.array(check_node_table(self.model, self.values, "values"), dtype=float)
        mask = self.model.node_mask()
        live = vals[mask]
        if not np.all(np.isfinite(live)):
            raise ParameterError(
                "payoff must be finite at every node", field="values",
                hint="supply a value for every (t, j) with j <= t", module=MODULE,
            )
        vals[~mask] = np.nan
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        bound = float(self.bound)
        worst = float(np.max(np.abs(live)))
        if worst > bound:
            raise BoundViolationError(
                f"|Y| reaches {worst:.6g} which exceeds the declared bound {bound:.6g}",
                field="bound", hint="Y must be bounded; raise the bound or clip the payoff",
                module=MODULE,
            )
        object.__setattr__(self, "bound", bound)

    @property
    def terminal(self) -> np.ndarray:
        n = self.model.n_steps
        return self.values[n, : n + 1].copy()

    def level(self, t: int) -> np.ndarray:
        return self.values[t, : t + 1]

    def sup_norm(self) -> float:
        return float(np.nanmax(np.abs(self.values)))


def payoff_from_function(
    model: LatticeModel, g: Callable[[float, float], float], bound: float
) -> PayoffProcess:
    """Evaluate ``g(time, state)`` at every node."""
    values = empty_node_table(model)
    for t, j in model.nodes():
        values[t, j] = g(t * model.dt, model.state(t, j))
    return PayoffProcess(model, values, bound)


def payoff_from_table(model: LatticeModel, values, bound=None) -> PayoffProcess:
    vals = np.array(values, dtype=float)
    if bound is None:
        bound = float(np.nanmax(np.abs(np.where(model.node_mask(), vals, np.nan))))
    return PayoffProcess(model, vals, bound)


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """First-hitting rule of a node region, absorbed at the first stop.

    ``decision[t, j]`` says whether a path that arrives at ``(t, j)`` still
    running stops there. Decisions below ``floor`` are cleared and the terminal
    level always stops.
    """

    model: LatticeModel
    decision: np.ndarray
    floor: int = 0

    def __post_init__(self):
        n = self.model.n_steps
        if not (0 <= int(self.floor) <= n):
            raise ParameterError(
                f"floor must lie in [0, {n}], got {self.floor}", field="floor",
                module=MODULE,
            )
        dec = np.array(check_node_table(self.model, self.decision, "decision"), dtype=bool)
        dec &= self.model.node_mask()
        dec[: int(self.floor)] = False
        dec[n, : n + 1] = True
        dec.setflags(write=False)
        object.__setattr__(self, "decision", dec)
        object.__setattr__(self, "floor", int(self.floor))

    def stops_at(self, t: int, j: int) -> bool:
        return bool(self.decision[t, j])

    def stop_level(self, path) -> int:
        """Level at which the path of moves (1 = up, 0 = down) is stopped."""
        for t, j in self.model.node_of_path(path):
            if self.decision[t, j]:
                return t
        raise AssertionError("terminal level always stops")  # pragma: no cover

    def stopped_status(self) -> np.ndarray:
        """Per node, whether paths through it have stopped at or before it:
        0 for none, 1 for all, 2 when it depends on the path taken."""
        n = self.model.n_steps
        arrival = np.full((n + 1, n + 1), -1, dtype=np.int8)
        after = np.full((n + 1, n + 1), -1, dtype=np.int8)
        arrival[0, 0] = 0
        for t in range(n + 1):
            for j in range(t + 1):
                a = arrival[t, j]
                after[t, j] = 1 if self.decision[t, j] else a
                if t == n:
                    continue
                for child in (j, j + 1):
                    cur = arrival[t + 1, child]
                    if cur == -1:
                        arrival[t + 1, child] = after[t, j]
                    elif cur != after[t, j]:
                        arrival[t + 1, child] = 2
        return after


def first_hitting_rule(model: LatticeModel, region, floor: int = 0) -> StoppingRule:
    """Stop at the first node at level >= floor flagged by ``region``."""
    region = np.asarray(check_node_table(model, region, "region"), dtype=bool)
    return StoppingRule(model, region, floor)


def deterministic_rule(model: LatticeModel, level: int) -> StoppingRule:
    region = empty_node_table(model, False, bool)
    region[level] = True
    return first_hitting_rule(model, region, level)


def all_region_rules(model: LatticeModel, floor: int = 0) -> Iterator[StoppingRule]:
    """Every node-region rule with the given floor (2**k of them, k the number
    of non-terminal nodes at levels >= floor)."""
    n = model.n_steps
    free = [(t, j) for t in range(floor, n) for j in range(t + 1)]
    for bits in itertools.product((False, True), repeat=len(free)):
        region = empty_node_table(model, False, bool)
        for (t, j), b in zip(free, bits):
            region[t, j] = b
        yield StoppingRule(model, region, floor)


def format_number(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".15g")


def write_node_csv(path, model: LatticeModel, columns: dict, *, steps=False) -> Path:
    """Write one row per node with ``t, j, state`` then the given columns."""
    path = Path(path)
    n = model.n_steps
    levels = range(n) if steps else range(n + 1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "j", "state", *columns])
        for t in levels:
            for j in range(t + 1):
                row = [t, j, format_number(model.state(t, j))]
                for col in columns.values():
                    v = col[t, j] if t < col.shape[0] else np.nan
                    if isinstance(v, (bool, np.bool_)):
                        row.append(int(v))
                    else:
                        row.append(format_number(v))
                w.writerow(row)
    return path


def write_payoff_csv(path, payoff: PayoffProcess) -> Path:
    return write_node_csv(path, payoff.model, {"value": payoff.values})


def read_payoff_csv(path, model: LatticeModel, bound=None) -> PayoffProcess:
    values = empty_node_table(model)
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            t, j = int(row["t"]), int(row["j"])
            if not (0 <= j <= t <= model.n_steps):
                raise ParameterError(
                    f"node ({t}, {j}) is outside the lattice", field="payoff.csv",
                    hint="rows must satisfy 0 <= j <= t <= n_steps", module=MODULE,
                )
            values[t, j] = float(row["value"])
    return payoff_from_table(model, values, bound)
