"""Moment-based selection estimators that leave the effect distribution free.

Replication moments exploit the symmetry of the latent (z, z^r) law: after
noising both coordinates up to a common variance, significance-classification
indicators have equal probability in either orientation, so their
inverse-probability-weighted difference is mean zero whatever the effect
distribution.  Meta-study moments compare each estimate against a noised-up
version of a more precise estimate.  Weighting by 1/p maps published moments
back to the latent population (the level constant drops out).

Point estimates solve the just-identified sample moments; confidence sets
invert the S-statistic against chi-square critical values, which stays valid
under weak identification and on the boundary.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import chi2

from .model import (
    InputError,
    SelectionFunction,
    StudyRecord,
    eval_selection,
    norm_cdf,
)

__all__ = [
    "MomentSystem",
    "GmmEstimate",
    "StockWrightSet",
    "replication_moment",
    "simple_replication_moment",
    "metastudy_pair_moment",
    "gmm_point_estimate",
    "stock_wright_statistic",
    "stock_wright_cs",
    "default_beta_grid",
]


def _phi_ratio_cdf(a, scale):
    """Phi(a / scale) with the scale -> 0+ limit 1{a > 0} + 1/2 * 1{a = 0}."""
    a = np.asarray(a, dtype=float)
    if scale > 0:
        return norm_cdf(a / scale)
    return np.where(a > 0, 1.0, np.where(a == 0, 0.5, 0.0))


@dataclass(frozen=True)
class MomentSystem:
    """A just-identified set of selection moments.

    ``selection_template`` fixes the cells; every non-reference coefficient is
    a free parameter.  ``cutoff_pairs`` supplies one (c1, c2) significance
    pair per moment for the replication kind; ``thresholds`` one c per moment
    for the pairwise meta-study kind.  ``printed_lower_bound`` keeps the
    asymmetric -c1 lower bound in the replication h-function's second factor;
    set it False for the symmetric -c2 variant as a sensitivity check.
    """

    kind: Literal["replication_baseline", "replication_simple", "metastudy_pairwise"]
    selection_template: SelectionFunction
    cutoff_pairs: tuple[tuple[float, float], ...] = ()
    thresholds: tuple[float, ...] = ()
    sigma_max: Optional[float] = None
    printed_lower_bound: bool = True

    def __post_init__(self):
        k_free = self.n_free
        if self.kind == "replication_baseline":
            if len(self.cutoff_pairs) != k_free:
                raise InputError(
                    f"need {k_free} cutoff pairs for {k_free} free coefficients"
                )
        elif self.kind == "replication_simple":
            if k_free != 1:
                raise InputError("the simple replication moment identifies one coefficient")
        elif self.kind == "metastudy_pairwise":
            if len(self.thresholds) != k_free:
                raise InputError(
                    f"need {k_free} thresholds for {k_free} free coefficients"
                )
        else:
            raise InputError(f"unknown moment system kind {self.kind!r}")

    @property
    def free_cells(self) -> tuple[int, ...]:
        sel = self.selection_template
        return tuple(k for k in range(sel.n_cells) if k != sel.reference_cell)

    @property
    def n_free(self) -> int:
        return len(self.free_cells)

    def beta_full(self, beta_free: np.ndarray) -> np.ndarray:
        full = np.asarray(self.selection_template.coefficients, dtype=float).copy()
        for cell, b in zip(self.free_cells, np.atleast_1d(beta_free)):
            full[cell] = b
        full[self.selection_template.reference_cell] = 1.0
        return full


# ---------------------------------------------------------------------------
# Moment kernels
# ---------------------------------------------------------------------------

def _h_replication(z, s, zr, sigma, c1, c2, sigma_max, printed_lower_bound):
    d1sq = sigma_max**2 - np.asarray(s, dtype=float) ** 2
    d2sq = sigma_max**2 - np.asarray(sigma, dtype=float) ** 2
    if np.any(d1sq < -1e-12) or np.any(d2sq < -1e-12):
        raise InputError("replication sd exceeds sigma_max")
    d1 = np.sqrt(np.clip(d1sq, 0.0, None))
    d2 = np.sqrt(np.clip(d2sq, 0.0, None))
    lower = -c1 if printed_lower_bound else -c2

    def cdf(a, d):
        out = np.where(
            d > 0,
            norm_cdf(np.divide(a, np.where(d > 0, d, 1.0))),
            np.where(a > 0, 1.0, np.where(a == 0, 0.5, 0.0)),
        )
        return out

    first = 1.0 - cdf(c1 - z, d1) + cdf(-c1 - z, d1)
    second = cdf(c2 - zr, d2) - cdf(lower - zr, d2)
    return first * second


def replication_moment(
    record: StudyRecord,
    p: SelectionFunction,
    c1: float,
    c2: float,
    sigma_max: float,
    printed_lower_bound: bool = True,
) -> float:
    """Symmetry moment for one replication pair, weighted by 1/p(z).

    Noises the original (unit variance) and the replication (variance
    sigma^2) up to sigma_max^2 and differences the two orientations of the
    significance indicator product; mean zero over published studies at the
    true selection function.  Degenerate noising (sigma = sigma_max)
    degrades the smooth factor to an indicator.
    """
    if not record.has_replication:
        raise InputError(f"record {record.study_id!r} has no replication pair")
    z, zr, rel = record.z, record.zr, record.rel_sigmar
    if rel > sigma_max:
        raise InputError(
            f"record {record.study_id!r}: relative replication sd {rel:g} "
            f"exceeds sigma_max {sigma_max:g}"
        )
    h_fwd = _h_replication(z, 1.0, zr, rel, c1, c2, sigma_max, printed_lower_bound)
    h_rev = _h_replication(zr, rel, z, 1.0, c1, c2, sigma_max, printed_lower_bound)
    return float((h_fwd - h_rev) / eval_selection(p, z))


def simple_replication_moment(record: StudyRecord, p: SelectionFunction) -> float:
    """Second-moment symmetry kernel: ((z^2 - 1) - (z_r^2 - sigma^2)) / p(z).

    Mean zero for any effect distribution and needs no sigma_max choice.
    """
    if not record.has_replication:
        raise InputError(f"record {record.study_id!r} has no replication pair")
    z, zr, rel = record.z, record.zr, record.rel_sigmar
    return float(((z**2 - 1.0) - (zr**2 - rel**2)) / eval_selection(p, z))


def metastudy_pair_moment(
    record_j: StudyRecord,
    record_jp: StudyRecord,
    p: SelectionFunction,
    c: float,
) -> float:
    """Pairwise meta-study moment: indicator for the noisier study minus the
    noised-up probability implied by the more precise one.

    Requires sigma_j > sigma_j'.  Sign-normalized records compare |x| cells
    instead.  Weighted by 1/p at both studies' z-statistics.
    """
    if record_j.sigma <= record_jp.sigma:
        raise InputError("first record must have the strictly larger sigma")
    sj, sp = record_j.sigma, record_jp.sigma
    d = math.sqrt(sj**2 - sp**2)
    folded = record_j.sign_normalized or record_jp.sign_normalized
    if folded:
        ind = 1.0 if abs(record_j.x) < c * sj else 0.0
        prob = float(
            _phi_ratio_cdf(c * sj - record_jp.x, d)
            - _phi_ratio_cdf(-c * sj - record_jp.x, d)
        )
    else:
        ind = 1.0 if record_j.x < c * sj else 0.0
        prob = float(_phi_ratio_cdf(c * sj - record_jp.x, d))
    w = eval_selection(p, record_j.z) * eval_selection(p, record_jp.z)
    return float((ind - prob) / w)


# ---------------------------------------------------------------------------
# Vectorized engines
# ---------------------------------------------------------------------------

class _ReplicationEngine:
    """Per-record contents m_j (weights excluded) with g_j = m_j / beta[cell_j]."""

    def __init__(self, records: Sequence[StudyRecord], system: MomentSystem):
        if any(not r.has_replication for r in records):
            raise InputError("replication moment systems need replication pairs")
        z = np.array([r.z for r in records])
        zr = np.array([r.zr for r in records])
        rel = np.array([r.rel_sigmar for r in records])
        self.n = len(z)
        self.cells = system.selection_template.cell_index(z)
        self.cluster = np.array([r.cluster_id for r in records])
        if system.kind == "replication_simple":
            self.contents = ((z**2 - 1.0) - (zr**2 - rel**2))[:, None]
        else:
            sigma_max = system.sigma_max
            if sigma_max is None:
                sigma_max = float(np.max(rel))
            if np.any(rel > sigma_max):
                raise InputError("a relative replication sd exceeds sigma_max")
            cols = []
            for c1, c2 in system.cutoff_pairs:
                fwd = _h_replication(z, 1.0, zr, rel, c1, c2, sigma_max,
                                     system.printed_lower_bound)
                rev = _h_replication(zr, rel, z, 1.0, c1, c2, sigma_max,
                                     system.printed_lower_bound)
                cols.append(fwd - rev)
            self.contents = np.column_stack(cols)
        self.system = system
        q = self.contents.shape[1]
        k = system.selection_template.n_cells
        # per-cell aggregates for fast grid scans
        self.cell_sum = np.zeros((k, q))
        self.cell_sq = np.zeros((k, q, q))
        for cell in range(k):
            m = self.contents[self.cells == cell]
            if len(m):
                self.cell_sum[cell] = m.sum(axis=0)
                self.cell_sq[cell] = m.T @ m

    def per_unit(self, beta_free) -> np.ndarray:
        beta = self.system.beta_full(beta_free)
        return self.contents / beta[self.cells][:, None]

    def gbar(self, beta_free) -> np.ndarray:
        beta = self.system.beta_full(beta_free)
        return (self.cell_sum / beta[:, None]).sum(axis=0) / self.n

    def var_gbar(self, beta_free, clustered: bool = False) -> np.ndarray:
        if clustered:
            g = self.per_unit(beta_free)
            gb = g.mean(axis=0)
            meat = np.zeros((g.shape[1], g.shape[1]))
            for lab in np.unique(self.cluster):
                s = (g[self.cluster == lab] - gb).sum(axis=0)
                meat += np.outer(s, s)
            return meat / self.n**2
        beta = self.system.beta_full(beta_free)
        second = (self.cell_sq / (beta**2)[:, None, None]).sum(axis=0) / self.n
        gb = self.gbar(beta_free)
        omega = second - np.outer(gb, gb)
        return omega / self.n


class _PairwiseEngine:
    """U-statistic contents over ordered pairs (larger sigma first)."""

    def __init__(self, records: Sequence[StudyRecord], system: MomentSystem):
        x = np.array([r.x for r in records])
        sigma = np.array([r.sigma for r in records])
        folded = np.array([r.sign_normalized for r in records], dtype=bool)
        n = len(x)
        if n < 3:
            raise InputError("need at least 3 records for pairwise moments")
        self.n = n
        self.cells = system.selection_template.cell_index(x / sigma)
        self.cluster = np.array([r.cluster_id for r in records])
        self.system = system
        q = len(system.thresholds)
        k = system.selection_template.n_cells

        # big[j, i] pairs record j (larger sigma) with record i
        big, small = np.where(sigma[:, None] > sigma[None, :])
        if len(big) == 0:
            raise InputError("pairwise moments need variation in sigma")
        d = np.sqrt(sigma[big] ** 2 - sigma[small] ** 2)
        contents = np.empty((len(big), q))
        for qi, c in enumerate(system.thresholds):
            top = c * sigma[big]
            if folded.any():
                ind = (np.abs(x[big]) < top).astype(float)
                prob = norm_cdf((top - x[small]) / d) - norm_cdf((-top - x[small]) / d)
            else:
                ind = (x[big] < top).astype(float)
                prob = norm_cdf((top - x[small]) / d)
            contents[:, qi] = ind - prob
        self.pair_big, self.pair_small, self.contents = big, small, contents
        self.n_pairs = len(big)

        # partner-cell aggregates: T[j, cell of partner, :]
        self.partner = np.zeros((n, k, q))
        np.add.at(self.partner, (big, self.cells[small]), contents)
        np.add.at(self.partner, (small, self.cells[big]), contents)

    def hajek(self, beta_free) -> np.ndarray:
        """Pseudo-observations: partner-averaged pair moments, (n, q)."""
        beta = self.system.beta_full(beta_free)
        t_scaled = (self.partner / beta[None, :, None]).sum(axis=1)
        return t_scaled / beta[self.cells][:, None] / (self.n - 1)

    def gbar(self, beta_free) -> np.ndarray:
        return self.hajek(beta_free).mean(axis=0)

    def var_gbar(self, beta_free, clustered: bool = True) -> np.ndarray:
        q = self.hajek(beta_free)
        gb = q.mean(axis=0)
        dev = q - gb
        meat = np.zeros((q.shape[1], q.shape[1]))
        if clustered:
            for lab in np.unique(self.cluster):
                s = dev[self.cluster == lab].sum(axis=0)
                meat += np.outer(s, s)
        else:
            meat = dev.T @ dev
        return 4.0 * meat / self.n**2


def _engine(records, system):
    if system.kind == "metastudy_pairwise":
        return _PairwiseEngine(records, system)
    return _ReplicationEngine(records, system)


# ---------------------------------------------------------------------------
# Point estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmEstimate:
    beta_hat: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    negative_solution: bool
    max_moment_residual: float


def gmm_point_estimate(
    records: Sequence[StudyRecord],
    system: MomentSystem,
    clustered: Optional[bool] = None,
) -> GmmEstimate:
    """Solve the just-identified sample moments for the selection coefficients.

    Root finding runs unbounded, so a negative solution is possible in small
    samples with weak selection; it is returned flagged rather than hidden.
    Variance is the usual just-identified sandwich; pairwise meta-study
    systems use Hajek-projection pseudo-observations (clustered by
    cluster_id by default, matching the dependence from multiple estimates
    per study).
    """
    eng = _engine(records, system)
    if clustered is None:
        clustered = system.kind == "metastudy_pairwise"
    q = eng.gbar(np.ones(system.n_free)).shape[0]
    if q != system.n_free:
        raise InputError("system must be just-identified")

    beta_hat = None
    if system.n_free == 1:
        beta_hat = _root_1d(lambda b: float(eng.gbar(np.array([b]))[0]))
        beta_hat = np.array([beta_hat])
    else:
        starts = [np.full(system.n_free, s) for s in (1.0, 0.5, 0.1, 2.0)]
        rng = np.random.default_rng(0)
        for _ in range(6):
            starts.append(np.exp(rng.normal(-1.0, 1.0, system.n_free)))
        best = None
        for s0 in starts:
            sol = optimize.root(lambda b: eng.gbar(b), s0, method="hybr")
            resid = float(np.max(np.abs(eng.gbar(sol.x))))
            if resid < 1e-10:
                best = sol.x
                break
            if best is None or resid < float(np.max(np.abs(eng.gbar(best)))):
                best = sol.x
        if best is None or float(np.max(np.abs(eng.gbar(best)))) > 1e-8:
            raise InputError("no root of the sample moments found")
        beta_hat = best

    resid = float(np.max(np.abs(eng.gbar(beta_hat))))
    grad = np.empty((q, system.n_free))
    for i in range(system.n_free):
        h = 1e-6 * max(abs(beta_hat[i]), 1e-3)
        up, dn = beta_hat.copy(), beta_hat.copy()
        up[i] += h
        dn[i] -= h
        grad[:, i] = (eng.gbar(up) - eng.gbar(dn)) / (2.0 * h)
    var_g = eng.var_gbar(beta_hat, clustered=clustered)
    g_inv = np.linalg.inv(grad)
    vcov = g_inv @ var_g @ g_inv.T
    return GmmEstimate(
        beta_hat=beta_hat,
        vcov=vcov,
        se=np.sqrt(np.diag(vcov)),
        negative_solution=bool(np.any(beta_hat < 0)),
        max_moment_residual=resid,
    )


def _root_1d(g) -> float:
    """Find a root of g over positive then negative half-lines (pole at 0)."""
    for grid in (np.geomspace(1e-4, 50.0, 200), -np.geomspace(1e-4, 50.0, 200)):
        vals = np.array([g(b) for b in grid])
        sign = np.sign(vals)
        flips = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
        if len(flips):
            lo, hi = grid[flips[0]], grid[flips[0] + 1]
            return float(optimize.brentq(g, lo, hi, xtol=1e-12))
        exact = np.nonzero(vals == 0.0)[0]
        if len(exact):
            return float(grid[exact[0]])
    raise InputError("no sign-change bracket found for the sample moment")


# ---------------------------------------------------------------------------
# Weak-identification-robust confidence sets
# ---------------------------------------------------------------------------

def stock_wright_statistic(engine_or_records, system: Optional[MomentSystem] = None,
                           beta_free=None, clustered: Optional[bool] = None) -> float:
    """S(beta) = gbar' Var(gbar)^-1 gbar at a candidate coefficient vector."""
    eng = engine_or_records
    if system is not None:
        eng = _engine(engine_or_records, system)
        if clustered is None:
            clustered = system.kind == "metastudy_pairwise"
    beta_free = np.atleast_1d(np.asarray(beta_free, dtype=float))
    gb = eng.gbar(beta_free)
    var = eng.var_gbar(beta_free, clustered=bool(clustered))
    return float(gb @ np.linalg.solve(var, gb))


@dataclass(frozen=True)
class StockWrightSet:
    grid: tuple[np.ndarray, ...]
    included: np.ndarray
    statistics: np.ndarray
    level: float
    intervals: tuple[tuple[float, float], ...]
    unbounded_above: tuple[bool, ...]
    n_skipped: int


def default_beta_grid(n_free: int, beta_max: float = 5.0,
                      resolution: float = 1e-3) -> tuple[np.ndarray, ...]:
    axis = np.arange(resolution, beta_max + resolution / 2.0, resolution)
    return tuple(axis.copy() for _ in range(n_free))


def stock_wright_cs(
    records: Sequence[StudyRecord],
    system: MomentSystem,
    beta_grid: Optional[tuple[np.ndarray, ...]] = None,
    level: float = 0.95,
    clustered: Optional[bool] = None,
) -> StockWrightSet:
    """Grid inversion of the S-statistic: the set of coefficients not rejected.

    Every exact root of the sample moments has S = 0 and is always included.
    Per-coordinate projection intervals are reported; a lower endpoint at the
    first grid point is closed to 0.0 (the boundary), and inclusion of the
    top grid point sets the unbounded-above flag.
    """
    eng = _engine(records, system)
    if clustered is None:
        clustered = system.kind == "metastudy_pairwise"
    if beta_grid is None:
        beta_grid = default_beta_grid(system.n_free)
    if len(beta_grid) != system.n_free:
        raise InputError("beta_grid needs one axis per free coefficient")
    crit = float(chi2.ppf(level, df=system.n_free))

    mesh = np.meshgrid(*beta_grid, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    stats = np.full(len(points), np.nan)
    skipped = 0
    for idx, beta in enumerate(points):
        try:
            stats[idx] = stock_wright_statistic(eng, beta_free=beta,
                                                clustered=clustered)
        except np.linalg.LinAlgError:
            skipped += 1
    if skipped:
        warnings.warn(f"{skipped} grid points skipped (singular moment variance)",
                      RuntimeWarning, stacklevel=2)
    included = stats <= crit

    intervals = []
    unbounded = []
    shape = tuple(len(ax) for ax in beta_grid)
    inc_nd = included.reshape(shape)
    for ax, axis_vals in enumerate(beta_grid):
        proj = inc_nd.any(axis=tuple(a for a in range(len(beta_grid)) if a != ax))
        if not proj.any():
            intervals.append((math.nan, math.nan))
            unbounded.append(False)
            continue
        first, last = int(np.argmax(proj)), len(proj) - 1 - int(np.argmax(proj[::-1]))
        lo = 0.0 if first == 0 else float(axis_vals[first])
        top = bool(proj[-1])
        hi = math.inf if top else float(axis_vals[last])
        intervals.append((lo, hi))
        unbounded.append(top)

    return StockWrightSet(
        grid=tuple(beta_grid),
        included=inc_nd,
        statistics=stats.reshape(shape),
        level=level,
        intervals=tuple(intervals),
        unbounded_above=tuple(unbounded),
        n_skipped=skipped,
    )
