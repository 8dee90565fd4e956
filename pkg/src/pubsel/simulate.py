"""Data-generating-process simulator and distributional diagnostics.

Draws latent studies (true effect, estimate, standard error, publication
flag, optional replication) and returns either the published subsample or the
full latent table.  Generation is chunked with a counter-based RNG keyed by
(seed, chunk index), so output is reproducible and independent of how chunks
might be scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .model import (
    EffectDistribution,
    InputError,
    SelectionFunction,
    StudyRecord,
    eval_selection,
    norm_cdf,
    norm_pdf,
)

__all__ = [
    "FixedSigma",
    "DiscreteSigma",
    "LogUniformSigma",
    "ReplicationRule",
    "SimConfig",
    "SimulationBudgetError",
    "simulate",
    "records_from_frame",
    "replication_probability",
    "symmetry_diagnostic",
    "z_density_diagnostics",
    "SymmetryDiagnostic",
    "ZDensityDiagnostics",
]

_CHUNK = 1 << 16


class SimulationBudgetError(RuntimeError):
    """The latent-draw budget ran out before reaching the published target."""


@dataclass(frozen=True)
class FixedSigma:
    value: float

    def sample(self, rng, n):
        return np.full(n, float(self.value))


@dataclass(frozen=True)
class DiscreteSigma:
    values: tuple[float, ...]
    weights: Optional[tuple[float, ...]] = None

    def sample(self, rng, n):
        w = None
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            w = w / w.sum()
        return rng.choice(np.asarray(self.values, dtype=float), size=n, p=w)


@dataclass(frozen=True)
class LogUniformSigma:
    low: float
    high: float

    def sample(self, rng, n):
        return np.exp(rng.uniform(math.log(self.low), math.log(self.high), size=n))


SigmaDist = Union[FixedSigma, DiscreteSigma, LogUniformSigma]


@dataclass(frozen=True)
class ReplicationRule:
    """Relative replication standard deviation: a constant, or a step rule on |z*|.

    The step rule mimics power-calculated replication designs, where noisier
    original results get larger replication samples.
    """

    fixed: Optional[float] = None
    cutoffs: Optional[tuple[float, ...]] = None
    values: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.fixed is not None:
            if self.cutoffs is not None or self.values is not None:
                raise InputError("give either a fixed value or a step rule, not both")
            if self.fixed <= 0:
                raise InputError("replication sd must be > 0")
        else:
            if self.cutoffs is None or self.values is None:
                raise InputError("step rule needs cutoffs and values")
            if len(self.values) != len(self.cutoffs) + 1:
                raise InputError("need len(cutoffs) + 1 values")
            if any(v <= 0 for v in self.values):
                raise InputError("replication sds must be > 0")

    def rel_sd(self, z_abs: np.ndarray) -> np.ndarray:
        if self.fixed is not None:
            return np.full_like(z_abs, float(self.fixed))
        idx = np.searchsorted(np.asarray(self.cutoffs), z_abs, side="right")
        return np.asarray(self.values, dtype=float)[idx]


@dataclass(frozen=True)
class SimConfig:
    mu: EffectDistribution
    p: SelectionFunction
    sigma_dist: SigmaDist = FixedSigma(1.0)
    replication: Optional[ReplicationRule] = None
    n_published: Optional[int] = None
    n_latent: Optional[int] = None
    seed: int = 0
    emit_latent: bool = False
    latent_budget: int = 50_000_000
    sign_normalize: bool = False

    def __post_init__(self):
        if (self.n_published is None) == (self.n_latent is None):
            raise InputError("set exactly one of n_published / n_latent")
        if self.p.covariate_offsets:
            raise InputError("simulation does not support covariate offsets")
        if self.sign_normalize and not self.p.symmetric:
            raise InputError("sign normalization needs a symmetric selection function")


def _gen_chunk(config: SimConfig, chunk_index: int, size: int) -> pd.DataFrame:
    rng = np.random.Generator(np.random.Philox(key=[config.seed, chunk_index]))
    theta = config.mu.sample(rng, size)
    sigma = config.sigma_dist.sample(rng, size)
    x = theta + sigma * rng.standard_normal(size)
    z = x / sigma
    accept_prob = np.asarray(eval_selection(config.p, z))
    max_beta = max(config.p.coefficients)
    d = rng.random(size) < accept_prob / max_beta
    frame = {
        "latent_index": chunk_index * _CHUNK + np.arange(size, dtype=np.int64),
        "theta_star": theta,
        "x": x,
        "sigma": sigma,
        "D": d.astype(np.int64),
    }
    if config.replication is not None:
        rel = config.replication.rel_sd(np.abs(z))
        sigmar = rel * sigma
        frame["xr"] = theta + sigmar * rng.standard_normal(size)
        frame["sigmar"] = sigmar
    return pd.DataFrame(frame)


def simulate(config: SimConfig) -> pd.DataFrame:
    """Simulate the truncated sampling process.

    Latent studies draw a true effect from ``mu``, a standard error from
    ``sigma_dist``, a normal estimate, and a publication flag that is
    Bernoulli in the selection probability normalized by its maximum (scale
    does not affect the published sample's law).  Returns the published rows
    with the CLI CSV schema, or the full latent table (with ``theta_star``,
    ``D`` and ``published_index``) when ``emit_latent`` is set.
    """
    chunks: list[pd.DataFrame] = []
    published_total = 0
    latent_total = 0
    chunk_index = 0
    if config.n_latent is not None:
        while latent_total < config.n_latent:
            size = min(_CHUNK, config.n_latent - latent_total)
            chunks.append(_gen_chunk(config, chunk_index, size))
            latent_total += size
            chunk_index += 1
    else:
        while published_total < config.n_published:
            if latent_total >= config.latent_budget:
                raise SimulationBudgetError(
                    f"latent budget {config.latent_budget} exhausted with "
                    f"{published_total}/{config.n_published} published draws"
                )
            chunk = _gen_chunk(config, chunk_index, _CHUNK)
            chunks.append(chunk)
            published_total += int(chunk["D"].sum())
            latent_total += len(chunk)
            chunk_index += 1

    table = pd.concat(chunks, ignore_index=True)
    pub_positions = np.flatnonzero(table["D"].to_numpy())
    if config.n_published is not None:
        pub_positions = pub_positions[: config.n_published]
        last = pub_positions[-1] if len(pub_positions) else -1
        table = table.iloc[: last + 1] if not config.emit_latent else table

    published_index = np.full(len(table), -1, dtype=np.int64)
    published_index[pub_positions] = np.arange(len(pub_positions))
    table = table.assign(published_index=published_index)

    if config.sign_normalize:
        sign = np.sign(table["x"].to_numpy())
        sign[sign == 0] = 1.0
        table = table.assign(x=sign * table["x"])
        if "xr" in table.columns:
            table = table.assign(xr=sign * table["xr"])

    table.insert(0, "study_id", table["latent_index"].map("sim{:08d}".format))
    table.insert(1, "cluster_id", table["study_id"])
    table = table.drop(columns=["latent_index"])

    if config.emit_latent:
        return table.reset_index(drop=True)
    cols = ["study_id", "cluster_id", "x", "sigma"]
    if config.replication is not None:
        cols += ["xr", "sigmar"]
    out = table.loc[table["published_index"] >= 0, cols]
    return out.reset_index(drop=True)


def records_from_frame(frame: pd.DataFrame, sign_normalized: bool = False) -> list[StudyRecord]:
    """Turn a simulate() table (or CLI-schema frame) into StudyRecords."""
    has_rep = "xr" in frame.columns and frame["xr"].notna().any()
    records = []
    for row in frame.itertuples(index=False):
        xr = getattr(row, "xr", None)
        sigmar = getattr(row, "sigmar", None)
        if xr is not None and (pd.isna(xr) or pd.isna(sigmar)):
            xr = sigmar = None
        records.append(
            StudyRecord(
                study_id=str(row.study_id),
                cluster_id=str(row.cluster_id),
                x=float(row.x),
                sigma=float(row.sigma),
                xr=None if not has_rep or xr is None else float(xr),
                sigmar=None if not has_rep or sigmar is None else float(sigmar),
                sign_normalized=sign_normalized,
            )
        )
    return records


def replication_probability(mu: EffectDistribution, cutoff: float = 1.96) -> float:
    """Chance a significant original is followed by a same-signed significant replication.

    Both draws are unit-variance normals around the same effect.  With all
    effects at zero this is 0.025 at the 5% threshold no matter the sample;
    with very large effects it approaches one, so the replication rate by
    itself says little about selection.
    """
    def num(theta):
        lo = norm_cdf(-cutoff - theta)
        hi = norm_cdf(-cutoff + theta)
        return lo * lo + hi * hi

    def den(theta):
        return norm_cdf(-cutoff - theta) + norm_cdf(-cutoff + theta)

    return mu.integrate(num) / mu.integrate(den)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetryDiagnostic:
    bin_edges: np.ndarray
    counts: np.ndarray           # joint (original bin, replication bin) counts
    h: np.ndarray                # log f(b,a)/f(a,b); NaN where undefined
    h_se: np.ndarray             # multinomial delta-method SEs for h
    residuals: np.ndarray        # (n_triples, 4): a, b, c, h(a,b)+h(b,c)+h(c,a)
    max_abs_residual: float
    bootstrap_se: float
    valid_bins: tuple[int, ...]
    excluded_bins: tuple[int, ...]


def _joint_counts(z, zr, edges):
    a = np.digitize(z, edges) - 1
    b = np.digitize(zr, edges) - 1
    nb = len(edges) - 1
    ok = (a >= 0) & (a < nb) & (b >= 0) & (b < nb)
    counts = np.zeros((nb, nb), dtype=np.int64)
    np.add.at(counts, (a[ok], b[ok]), 1)
    return counts


def _max_triangle_residual(counts, valid):
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.log(counts.T.astype(float)) - np.log(counts.astype(float))
    best = 0.0
    found = False
    for ai in range(len(valid)):
        for bi in range(ai + 1, len(valid)):
            for ci in range(bi + 1, len(valid)):
                a, b, c = valid[ai], valid[bi], valid[ci]
                r = h[a, b] + h[b, c] + h[c, a]
                if np.isfinite(r):
                    found = True
                    best = max(best, abs(r))
    return best if found else np.nan


def symmetry_diagnostic(
    records: Sequence[StudyRecord],
    bin_edges: Sequence[float],
    n_bootstrap: int = 500,
    seed: int = 0,
    min_count: int = 5,
) -> SymmetryDiagnostic:
    """Test the symmetry restriction on the joint (z, z^r) law.

    Absent selection the binned joint frequencies are symmetric, so the
    pairwise log ratios h(a, b) = log f(b, a) - log f(a, b) are consistent
    log selection-probability differences, and every bin triple satisfies
    h(a,b) + h(b,c) + h(c,a) = 0.  Bins with fewer than ``min_count``
    observations in either orientation are excluded.
    """
    pairs = [(r.z, r.zr) for r in records if r.has_replication]
    if not pairs:
        raise InputError("no replication pairs in data")
    z = np.array([p[0] for p in pairs])
    zr = np.array([p[1] for p in pairs])
    edges = np.asarray(bin_edges, dtype=float)
    if len(edges) < 4:
        raise InputError("need at least 3 bins")
    counts = _joint_counts(z, zr, edges)

    row, col = counts.sum(axis=1), counts.sum(axis=0)
    valid = tuple(int(k) for k in range(len(edges) - 1)
                  if row[k] >= min_count and col[k] >= min_count)
    excluded = tuple(k for k in range(len(edges) - 1) if k not in valid)
    if len(valid) < 3:
        raise InputError(
            f"need >= 3 bins with >= {min_count} observations in both "
            f"orientations; have {len(valid)}"
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        cf = counts.astype(float)
        h = np.log(cf.T) - np.log(cf)
        h_se = np.sqrt(1.0 / cf + 1.0 / cf.T)
    h[~np.isfinite(h)] = np.nan
    h_se[~np.isfinite(h_se)] = np.nan

    triples = []
    for ai in range(len(valid)):
        for bi in range(ai + 1, len(valid)):
            for ci in range(bi + 1, len(valid)):
                a, b, c = valid[ai], valid[bi], valid[ci]
                r = h[a, b] + h[b, c] + h[c, a]
                if np.isfinite(r):
                    triples.append((a, b, c, r))
    residuals = np.array(triples, dtype=float) if triples else np.empty((0, 4))
    max_resid = float(np.max(np.abs(residuals[:, 3]))) if len(residuals) else np.nan

    rng = np.random.default_rng(seed)
    boot = []
    n = len(z)
    for _ in range(n_bootstrap):
        idx = rng.integers(0, n, n)
        boot.append(_max_triangle_residual(_joint_counts(z[idx], zr[idx], edges), valid))
    boot = np.asarray(boot, dtype=float)
    boot_se = float(np.nanstd(boot))

    return SymmetryDiagnostic(
        bin_edges=edges,
        counts=counts,
        h=h,
        h_se=h_se,
        residuals=residuals,
        max_abs_residual=max_resid,
        bootstrap_se=boot_se,
        valid_bins=valid,
        excluded_bins=excluded,
    )


@dataclass(frozen=True)
class ZDensityDiagnostics:
    bin_edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    cutoffs: tuple[float, ...]
    jump_ratios: tuple[float, ...]
    bunching_bound: float
    bunching_bins: tuple[int, ...]
    n: int


def z_density_diagnostics(
    records: Sequence[StudyRecord],
    cutoffs: Sequence[float],
    bin_width: float = 0.1,
) -> ZDensityDiagnostics:
    """Histogram of z with jump ratios at candidate cutoffs and bunching flags.

    The latent z density is a normal mixture, hence bounded by phi(0); the
    published density can exceed that only by the selection function's
    max/min ratio, which the jump ratios themselves estimate.  Bins above
    that implied ceiling are flagged.
    """
    if len(records) < 50:
        raise InputError("need at least 50 records for density diagnostics")
    z = np.array([r.z for r in records])
    lo = math.floor(z.min() / bin_width) * bin_width
    hi = math.ceil(z.max() / bin_width) * bin_width
    n_bins = max(int(round((hi - lo) / bin_width)), 1)
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(z, bins=edges)
    density = counts / (len(z) * bin_width)

    ratios = []
    for c in cutoffs:
        left = np.mean((z >= c - bin_width) & (z < c)) / bin_width
        right = np.mean((z >= c) & (z < c + bin_width)) / bin_width
        if left == 0:
            ratios.append(math.inf if right > 0 else math.nan)
        else:
            ratios.append(right / left)

    # implied relative selection level per cell from the cumulated jumps
    level, levels = 1.0, [1.0]
    for r in ratios:
        level = level * r if np.isfinite(r) and r > 0 else level
        levels.append(level)
    spread = max(levels) / min(levels)
    bound = spread * norm_pdf(0.0)
    flagged = tuple(int(i) for i in np.flatnonzero(density > bound))

    return ZDensityDiagnostics(
        bin_edges=edges,
        counts=counts,
        density=density,
        cutoffs=tuple(float(c) for c in cutoffs),
        jump_ratios=tuple(float(r) for r in ratios),
        bunching_bound=float(bound),
        bunching_bins=flagged,
        n=len(z),
    )
