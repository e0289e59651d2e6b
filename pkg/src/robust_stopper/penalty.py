"""Penalty functions ``f(t, z)`` and the transform ``inf_z f(t, z) + u z``.

Three families are supported:

* ``entropic``: ``f(z) = (r/2) z**2`` with closed-form transform and minimizer.
* ``power``: ``f(z) = max(Lam_t (|z - Ups_t|**(2+lam) - |Ups_t|**(2+lam)), 0)``,
  minimized numerically by golden-section search.
* ``tabulated``: piecewise linear on a sorted ``z`` grid, ``+inf`` outside it;
  the transform is exact by enumeration of the grid vertices.

``Lam`` and ``Ups`` of the power family, and the rows of a tabulated family,
may vary with the time index ``t``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AssumptionViolationError, ParameterError

MODULE = "penalty"
TOL_OPT = 1e-10
MAX_GOLDEN_ITER = 200
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _as_levels(value, name):
    if np.ndim(value) == 0:
        return float(value)
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ParameterError(f"{name} must be a scalar or a 1-d table over time",
                             field=name, module=MODULE)
    return tuple(float(x) for x in arr)


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    family: str
    r: float | None = None
    Lam: float | tuple = 1.0
    lam: float = 0.0
    Ups: float | tuple = 0.0
    z_grid: np.ndarray | None = None
    f_table: np.ndarray | None = None
    eps: float = 1.0
    upsilon_bound: float = 0.0
    ell: float = 0.0
    psi_bound: float = 0.0
    growth_M: float = 1.0
    tol_opt: float = TOL_OPT

    # -- constructors -----------------------------------------------------

    @classmethod
    def entropic(cls, r, **assumptions):
        if not (r > 0):
            raise ParameterError(f"risk tolerance r must be positive, got {r}",
                                 field="penalty.r", module=MODULE)
        r = float(r)
        params = dict(eps=r / 2.0, upsilon_bound=0.0, ell=0.0, psi_bound=0.0,
                      growth_M=1.0 / r)
        params.update(assumptions)
        return cls("entropic", r=r, **params)

    @classmethod
    def power(cls, Lam=1.0, lam=0.0, Ups=0.0, **assumptions):
        Lam = _as_levels(Lam, "penalty.Lam")
        Ups = _as_levels(Ups, "penalty.Ups")
        lams = np.atleast_1d(Lam)
        if np.any(lams <= 0):
            raise ParameterError("Lam must be positive", field="penalty.Lam", module=MODULE)
        if lam < 0:
            raise ParameterError("lam must be >= 0", field="penalty.lam", module=MODULE)
        eps = float(np.min(lams))
        ups_b = float(np.max(np.abs(np.atleast_1d(Ups))))
        p = 2.0 + lam
        c = (p * eps) ** (-1.0 / (1.0 + lam))
        params = dict(
            eps=eps,
            upsilon_bound=ups_b,
            ell=float(np.max(lams)) * (1.0 + ups_b ** p),
            psi_bound=c + 3.0 * ups_b,
            growth_M=c,
        )
        params.update(assumptions)
        return cls("power", Lam=Lam, lam=float(lam), Ups=Ups, **params)

    @classmethod
    def tabulated(cls, z_grid, values, **assumptions):
        z = np.asarray(z_grid, dtype=float)
        table = np.atleast_2d(np.asarray(values, dtype=float))
        if z.ndim != 1 or z.size < 1 or np.any(np.diff(z) <= 0):
            raise ParameterError("z grid must be non-empty and strictly increasing",
                                 field="penalty.z_grid", module=MODULE)
        if table.shape[1] != z.size:
            raise ParameterError(f"table rows need {z.size} values, got {table.shape[1]}",
                                 field="penalty.values", module=MODULE)
        if not (z[0] <= 0.0 <= z[-1]):
            raise ParameterError("z grid must bracket 0", field="penalty.z_grid",
                                 module=MODULE)
        if np.any(table < 0):
            raise ParameterError("tabulated penalty must be non-negative",
                                 field="penalty.values", module=MODULE)
        z.setflags(write=False)
        table.setflags(write=False)
        params = dict(
            eps=1.0,
            upsilon_bound=0.0,
            ell=float(max(0.0, np.max(z ** 2 - table))),
            psi_bound=float(np.max(np.abs(z))),
            growth_M=1.0,
        )
        params.update(assumptions)
        return cls("tabulated", z_grid=z, f_table=table, **params)

    # -- helpers ----------------------------------------------------------

    @property
    def n_levels(self) -> int | None:
        """Number of time levels the parameters are tabulated over, or None
        when the penalty does not depend on time."""
        if self.family == "power":
            sizes = [len(p) for p in (self.Lam, self.Ups) if isinstance(p, tuple)]
            return min(sizes) if sizes else None
        if self.family == "tabulated" and self.f_table.shape[0] > 1:
            return self.f_table.shape[0]
        return None

    def levels(self) -> range:
        return range(self.n_levels or 1)

    def _at(self, param, t, name):
        if isinstance(param, tuple):
            if not 0 <= t < len(param):
                raise ParameterError(f"{name} has no entry for time index {t}",
                                     field=f"penalty.{name}", module=MODULE)
            return param[t]
        return param

    def _row(self, t):
        if self.f_table.shape[0] == 1:
            return self.f_table[0]
        if not 0 <= t < self.f_table.shape[0]:
            raise ParameterError(f"tabulated penalty has no row for time index {t}",
                                 field="penalty.values", module=MODULE)
        return self.f_table[t]

    def describe(self) -> dict:
        out = {"family": self.family}
        if self.family == "entropic":
            out["r"] = self.r
        elif self.family == "power":
            out.update(Lam=self.Lam, lam=self.lam, Ups=self.Ups)
        else:
            out.update(z_grid=self.z_grid.tolist(), values=self.f_table.tolist())
        out.update(eps=self.eps, upsilon_bound=self.upsilon_bound, ell=self.ell,
                   psi_bound=self.psi_bound, growth_M=self.growth_M)
        return out


def f_eval(spec: PenaltySpec, t: int, z):
    """Penalty ``f(t, z)``; broadcasts over array ``z``. May return ``inf``."""
    z = np.asarray(z, dtype=float)
    if spec.family == "entropic":
        out = 0.5 * spec.r * z * z
    elif spec.family == "power":
        lam_t = spec._at(spec.Lam, t, "Lam")
        ups_t = spec._at(spec.Ups, t, "Ups")
        p = 2.0 + spec.lam
        out = np.maximum(lam_t * (np.abs(z - ups_t) ** p - abs(ups_t) ** p), 0.0)
    elif spec.family == "tabulated":
        grid = spec.z_grid
        row = spec._row(t)
        inside = (z >= grid[0]) & (z <= grid[-1])
        out = np.where(inside, np.interp(z, grid, row), np.inf)
    else:
        raise ParameterError(f"unknown penalty family {spec.family!r}",
                             field="penalty.family", module=MODULE)
    return out if out.ndim else float(out)


def _power_right_slope(spec, t, z):
    """Right derivative of the power penalty (which is convex)."""
    lam_t = spec._at(spec.Lam, t, "Lam")
    ups_t = spec._at(spec.Ups, t, "Ups")
    p = 2.0 + spec.lam
    x = z - ups_t
    inner = lam_t * (np.abs(x) ** p - abs(ups_t) ** p)
    slope = p * lam_t * np.abs(x) ** (p - 1.0) * np.sign(x)
    return np.where(inner > 0, slope, np.where(inner == 0, np.maximum(slope, 0.0), 0.0))


def _golden_minimize(spec, t, u):
    """Golden-section search of ``f(t, z) + u z`` on ``|z| <= psi + M |u| + 1``,
    vectorized over ``u``. Returns (argmin, minimum).

    Value comparisons stall near 1e-8 in the argument, so once the bracket is
    narrow the power family is finished by bisecting on the sign of the right
    derivative down to rounding level; that point is returned.
    """
    u = np.asarray(u, dtype=float)
    half = spec.psi_bound + spec.growth_M * np.abs(u) + 1.0
    a, b = -half, half.copy()
    coarse = 1e-6 if spec.family == "power" else spec.tol_opt

    def obj(z):
        return f_eval(spec, t, z) + u * z

    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(MAX_GOLDEN_ITER):
        if np.all(b - a < coarse):
            break
        left = fc <= fd
        # keep [a, d] where the left probe wins, [c, b] otherwise
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _INVPHI * (b - a)
        new_d = a + _INVPHI * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_next = np.where(left, obj(new_c), fd)
        fd_next = np.where(left, fc, obj(new_d))
        c, d, fc, fd = c_next, d_next, fc_next, fd_next
    z = 0.5 * (a + b)
    if spec.family == "power":
        # golden can drift out of a flat valley; fall back to the full
        # bracket when the slope signs do not straddle a root
        lo, hi = a - coarse, b + coarse
        lo = np.where(_power_right_slope(spec, t, lo) + u < 0, lo, -half)
        hi = np.where(_power_right_slope(spec, t, hi) + u >= 0, hi, half)
        # bisection is cheap, so run it to rounding level rather than tol_opt:
        # next to a kink the value error is the slope times the bracket
        for _ in range(MAX_GOLDEN_ITER):
            if np.all(hi - lo <= 4.0 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))):
                break
            mid = 0.5 * (lo + hi)
            up = _power_right_slope(spec, t, mid) + u >= 0
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
        # the objective is convex, so the slope bracket holds the minimizer;
        # value comparisons cannot be trusted next to an asymmetric kink
        z = 0.5 * (lo + hi)
    val = obj(z)
    # z = 0 is always a candidate; prefer it on ties
    f0 = f_eval(spec, t, 0.0)
    use_zero = val >= f0
    z = np.where(use_zero, 0.0, z)
    val = np.where(use_zero, f0, val)
    return z, val


def _vertex_minimize(spec, t, u):
    grid = spec.z_grid
    row = spec._row(t)
    u = np.asarray(u, dtype=float)
    vals = row[None, :] + u.reshape(-1, 1) * grid[None, :]
    best = vals.min(axis=1)
    # tie-break: smallest |z|, then the negative one
    order = np.lexsort((grid, np.abs(grid)))
    ranked = vals[:, order]
    first = np.argmax(ranked <= best[:, None], axis=1)
    z = grid[order][first]
    return z.reshape(u.shape), best.reshape(u.shape)


def _minimize(spec, t, u):
    u = np.asarray(u, dtype=float)
    if spec.family == "entropic":
        return -u / spec.r, -(u * u) / (2.0 * spec.r)
    if spec.family == "power":
        return _golden_minimize(spec, t, u)
    if spec.family == "tabulated":
        return _vertex_minimize(spec, t, u)
    raise ParameterError(f"unknown penalty family {spec.family!r}",
                         field="penalty.family", module=MODULE)


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def f_conjugate(spec: PenaltySpec, t: int, u):
    """``inf_z f(t, z) + u z``; always <= 0 because ``f(t, 0) = 0``."""
    return _scalar(_minimize(spec, t, u)[1])


def z_star(spec: PenaltySpec, t: int, u):
    """A minimizer of ``f(t, z) + u z`` (smallest ``|z|`` on ties).

    Raises AssumptionViolationError when ``|z*| > psi + M |u|``.
    """
    u = np.asarray(u, dtype=float)
    z, _ = _minimize(spec, t, u)
    bound = spec.psi_bound + spec.growth_M * np.abs(u)
    slack = bound - np.abs(z)
    if np.any(slack < -1e-9 * (1.0 + bound)):
        k = int(np.argmin(slack))
        raise AssumptionViolationError(
            f"(H3) minimizer bound fails: |z*| = {np.ravel(np.abs(z))[k]:.6g} > "
            f"psi + M|u| = {np.ravel(bound)[k]:.6g} at u = {np.ravel(u)[k]:.6g}",
            assumption="H3", field="penalty.psi_bound/growth_M",
            hint="increase psi_bound or growth_M, or check the penalty family",
            module=MODULE,
        )
    return _scalar(z)


def conjugate_lower_bound(spec: PenaltySpec, u):
    """Quadratic-growth floor ``-(1+eps)/(4 eps) u^2 - |Ups|^2 - ell``."""
    u = np.asarray(u, dtype=float)
    k = (1.0 + spec.eps) / (4.0 * spec.eps)
    return _scalar(-k * u * u - spec.upsilon_bound ** 2 - spec.ell)


@dataclass
class Check:
    passed: bool
    margin: float
    worst_at: float | None = None


@dataclass
class AssumptionReport:
    checks: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def as_dict(self) -> dict:
        return {k: {"passed": c.passed, "margin": c.margin, "worst_at": c.worst_at}
                for k, c in self.checks.items()}


def check_assumptions(spec: PenaltySpec, z_samples, u_samples, tol=1e-12) -> AssumptionReport:
    """Sample-based audit of the penalty assumptions.

    ``f3`` reports the largest ``|f(t, 0)|`` as its margin. The other checks
    report the smallest slack of their inequality, negative when violated.
    """
    z = np.asarray(z_samples, dtype=float)
    u = np.asarray(u_samples, dtype=float)
    if z.size == 0 or u.size == 0:
        raise ParameterError("sample lists must be non-empty", field="samples",
                             module=MODULE)
    report = AssumptionReport()
    f0, nonneg, h2, h3 = [], [], [], []
    for t in spec.levels():
        f0.append(abs(f_eval(spec, t, 0.0)))
        fz = np.asarray(f_eval(spec, t, z))
        nonneg.append((float(np.min(fz)), float(z[np.argmin(fz)])))
        ups_t = spec._at(spec.Ups, t, "Ups") if spec.family == "power" else 0.0
        with np.errstate(invalid="ignore"):
            s2 = fz - (spec.eps * (z - ups_t) ** 2 - spec.ell)
        s2 = np.where(np.isnan(s2), np.inf, s2)
        h2.append((float(np.min(s2)), float(z[np.argmin(s2)])))
        zs, _ = _minimize(spec, t, u)
        s3 = spec.psi_bound + spec.growth_M * np.abs(u) - np.abs(zs)
        h3.append((float(np.min(s3)), float(u[np.argmin(s3)])))
    worst_f0 = max(f0)
    report.checks["f3"] = Check(worst_f0 <= tol, worst_f0, 0.0)
    for name, vals in (("nonnegative", nonneg), ("H2", h2), ("H3", h3)):
        m, at = min(vals)
        report.checks[name] = Check(m >= -tol, m, at)
    return report


def load_tabulated_csv(paths, **assumptions) -> PenaltySpec:
    """Build a tabulated penalty from two-column ``z, f`` CSV files, one per
    time index (a single file gives a time-homogeneous penalty)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    grids, rows = [], []
    for p in paths:
        zs, fs = [], []
        with Path(p).open(newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].strip().startswith("#"):
                    continue
                try:
                    zs.append(float(rec[0]))
                    fs.append(float(rec[1]))
                except ValueError:
                    if zs:
                        raise ParameterError(f"bad row {rec!r} in {p}",
                                             field="penalty.csv", module=MODULE)
        grids.append(np.asarray(zs))
        rows.append(fs)
    if any(g.shape != grids[0].shape or np.any(g != grids[0]) for g in grids):
        raise ParameterError("all tabulated files must share one z grid",
                             field="penalty.csv", module=MODULE)
    return PenaltySpec.tabulated(grids[0], rows, **assumptions)
