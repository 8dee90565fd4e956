"""Log-likelihoods of published results under step-function selection.

Three variants: replication pairs (original + replication estimate per
study), meta-study (estimate + standard error per study), and a latent
generalization where the publication probability also depends on the true
effect.  All densities are truncated likelihoods: the latent normal model
reweighted by the selection function and renormalized by the average
publication probability of a latent study.

The conditional density of the study's standard error enters the full
likelihood multiplicatively and carries no information about selection or
effects, so it is dropped throughout.

Per-record terms are evaluated on one shared quadrature grid over the effect
distribution, in the log domain, so folded (sign-normalized) densities stay
finite far into the tails.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from ._kernels import meta_logsum, pair_logsum
from .model import (
    EffectDistribution,
    InputError,
    ModelEvaluationError,
    SelectionFunction,
    StudyRecord,
    _cell_probabilities,
    norm_cdf,
)

__all__ = [
    "ModelSpec",
    "replication_loglik",
    "metastudy_loglik",
    "latent_replication_loglik",
    "loglik",
    "loglik_terms",
    "latent_psi",
]

_LOG_SQRT2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelSpec:
    """A complete selection model: data kind, selection function, effects.

    ``latent_gamma`` (length = number of selection cells, zero at the
    reference cell) switches the replication likelihood to the latent model
    where p(z, theta) = beta_k + gamma_k * Psi(theta) on cell k, with Psi
    rising from 0 at theta = 0 toward 1 for large |theta|.
    """

    kind: Literal["replication", "metastudy"]
    selection: SelectionFunction
    effect: EffectDistribution
    latent_gamma: Optional[tuple[float, ...]] = None
    latent_cutoff: float = 1.96

    def __post_init__(self):
        if self.kind not in ("replication", "metastudy"):
            raise InputError(f"unknown model kind {self.kind!r}")
        if self.latent_gamma is not None:
            gam = tuple(float(g) for g in self.latent_gamma)
            object.__setattr__(self, "latent_gamma", gam)
            if len(gam) != self.selection.n_cells:
                raise InputError(
                    f"latent_gamma needs {self.selection.n_cells} entries, got {len(gam)}"
                )
            if gam[self.selection.reference_cell] != 0.0:
                raise InputError("latent_gamma must be 0 at the reference cell")
            if self.kind != "replication":
                raise InputError("the latent selection model needs replication data")

    @property
    def is_latent(self) -> bool:
        return self.latent_gamma is not None

    def with_selection_coefficients(self, coefficients) -> "ModelSpec":
        return replace(self, selection=self.selection.with_coefficients(coefficients))


def latent_psi(theta, cutoff: float = 1.96):
    """Weight on the latent coefficient: 0 at theta = 0, -> 1 as |theta| -> inf.

    Built from the probability that an independent N(theta, 1) signal lands
    inside (-cutoff, cutoff), rescaled so the two limits above hold.
    """
    theta = np.asarray(theta, dtype=float)
    base = norm_cdf(cutoff - theta) - norm_cdf(-cutoff - theta)
    at_zero = 2.0 * norm_cdf(cutoff) - 1.0
    return (base - at_zero) / (-at_zero)


# ---------------------------------------------------------------------------
# Packed data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicationData:
    """Replication records as flat arrays (z-scale)."""

    ids: np.ndarray
    z: np.ndarray
    zr: np.ndarray
    relsd: np.ndarray
    folded: np.ndarray
    cluster: np.ndarray

    @property
    def n(self) -> int:
        return len(self.z)


@dataclass(frozen=True)
class MetaStudyData:
    """Meta-study records as flat arrays (outcome scale plus z)."""

    ids: np.ndarray
    x: np.ndarray
    sigma: np.ndarray
    folded: np.ndarray
    cluster: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return self.x / self.sigma

    @property
    def n(self) -> int:
        return len(self.x)


def pack_replication(records: Sequence[StudyRecord]) -> ReplicationData:
    missing = [r.study_id for r in records if not r.has_replication]
    if missing:
        raise InputError(
            f"replication likelihood needs xr/sigmar on every record; "
            f"missing for {missing[:5]}" + ("..." if len(missing) > 5 else "")
        )
    return ReplicationData(
        ids=np.array([r.study_id for r in records]),
        z=np.array([r.z for r in records], dtype=float),
        zr=np.array([r.zr for r in records], dtype=float),
        relsd=np.array([r.rel_sigmar for r in records], dtype=float),
        folded=np.array([r.sign_normalized for r in records], dtype=bool),
        cluster=np.array([r.cluster_id for r in records]),
    )


def pack_metastudy(records: Sequence[StudyRecord]) -> MetaStudyData:
    return MetaStudyData(
        ids=np.array([r.study_id for r in records]),
        x=np.array([r.x for r in records], dtype=float),
        sigma=np.array([r.sigma for r in records], dtype=float),
        folded=np.array([r.sign_normalized for r in records], dtype=bool),
        cluster=np.array([r.cluster_id for r in records]),
    )


def _check_folding(spec: ModelSpec, folded: np.ndarray):
    if np.any(folded) and not spec.selection.symmetric:
        raise InputError(
            "sign-normalized records need a symmetric selection function"
        )


def _log_selection_at(p: SelectionFunction, z: np.ndarray) -> np.ndarray:
    beta = p.cell_coefficients()
    with np.errstate(divide="ignore"):
        return np.log(beta)[p.cell_index(z)]


def _warn_zero_density(ids: np.ndarray, terms: np.ndarray):
    dead = ~np.isfinite(terms)
    if np.any(dead):
        first = ids[dead][:5]
        warnings.warn(
            f"zero model density at record(s) {list(first)}; log-likelihood is -inf",
            RuntimeWarning,
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# Replication likelihood
# ---------------------------------------------------------------------------

def _gaussian_pair_logsum(z, zr, relsd, nodes, log_w):
    """logsumexp over nodes of the product N(z; theta, 1) * N(zr; theta, relsd^2).

    The two Gaussian factors collapse to a single quadratic in theta around
    the precision-weighted mean, so only one exp pass is needed.
    """
    prec = 1.0 + 1.0 / relsd**2
    m = (z + zr / relsd**2) / prec
    const = z**2 + zr**2 / relsd**2 - prec * m**2
    inner = pair_logsum(nodes, log_w, prec, m)
    return inner - 0.5 * const - 2.0 * _LOG_SQRT2PI - np.log(relsd)


def _replication_terms(data: ReplicationData, spec: ModelSpec, n_nodes: int) -> np.ndarray:
    _check_folding(spec, data.folded)
    rule = spec.effect.quadrature(n_nodes)
    nodes, log_w = rule.nodes, np.log(rule.weights)
    pm = spec.selection.mirrored()

    log_num = _gaussian_pair_logsum(data.z, data.zr, data.relsd, nodes, log_w)
    log_num = log_num + _log_selection_at(pm, data.z)
    if np.any(data.folded):
        flip = _gaussian_pair_logsum(-data.z, -data.zr, data.relsd, nodes, log_w)
        flip = flip + _log_selection_at(pm, -data.z)
        log_num = np.where(data.folded, np.logaddexp(log_num, flip), log_num)

    beta = pm.cell_coefficients()
    epp = _cell_probabilities(np.asarray(pm.cutoffs), nodes) @ beta
    log_den = np.log(float(np.dot(rule.weights, epp)))
    return log_num - log_den


def replication_loglik(records: Sequence[StudyRecord], spec: ModelSpec,
                       n_nodes: int = 201) -> float:
    """Sum of log densities of (z, z^r) pairs under the selection model.

    Records supply the original estimate and standard error plus the
    replication pair; everything is evaluated on the original study's z
    scale.  Sign-normalized records contribute the folded density
    f(w, w^r) + f(-w, -w^r).  Returns -inf (with a warning naming the record)
    if any record has zero density.
    """
    if spec.kind != "replication" or spec.is_latent:
        raise InputError("spec must have kind='replication' and no latent_gamma")
    data = pack_replication(records)
    terms = _replication_terms(data, spec, n_nodes)
    _warn_zero_density(data.ids, terms)
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# Meta-study likelihood
# ---------------------------------------------------------------------------

def _metastudy_terms(data: MetaStudyData, spec: ModelSpec, n_nodes: int) -> np.ndarray:
    _check_folding(spec, data.folded)
    rule = spec.effect.quadrature(n_nodes)
    nodes, log_w = rule.nodes, np.log(rule.weights)
    pm = spec.selection.mirrored()
    beta = pm.cell_coefficients()
    cuts = np.asarray(pm.cutoffs)
    z = data.z

    # folded records add the mirror-image Gaussian inside the integral
    log_num = meta_logsum(nodes, log_w, data.x, data.sigma, data.folded)
    log_num += _log_selection_at(pm, z) - np.log(data.sigma) - _LOG_SQRT2PI

    # denominator: E over theta of the cell-average publication probability,
    # cached per unique sigma since cutoffs scale with it
    log_den = np.empty(data.n)
    for sig in np.unique(data.sigma):
        sel = data.sigma == sig
        epp = _cell_probabilities(cuts, nodes / sig) @ beta
        log_den[sel] = np.log(float(np.dot(rule.weights, epp)))
    return log_num - log_den


def metastudy_loglik(records: Sequence[StudyRecord], spec: ModelSpec,
                     n_nodes: int = 201) -> float:
    """Sum of log densities of (x, sigma) pairs under the selection model.

    Selection acts on the z-statistic x/sigma; the effect distribution lives
    on the outcome scale.  Sign-normalized records use the folded density
    f(|x|, sigma) = f(x, sigma) + f(-x, sigma).
    """
    if spec.kind != "metastudy":
        raise InputError("spec must have kind='metastudy'")
    data = pack_metastudy(records)
    terms = _metastudy_terms(data, spec, n_nodes)
    _warn_zero_density(data.ids, terms)
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# Latent selection model (publication probability depends on theta too)
# ---------------------------------------------------------------------------

def _latent_replication_terms(data: ReplicationData, spec: ModelSpec,
                              n_nodes: int) -> np.ndarray:
    _check_folding(spec, data.folded)
    rule = spec.effect.quadrature(n_nodes)
    nodes, weights = rule.nodes, rule.weights
    log_w = np.log(weights)
    pm = spec.selection.mirrored()
    beta = pm.cell_coefficients()

    gamma = np.asarray(spec.latent_gamma, dtype=float)
    if spec.selection.symmetric:
        gamma = np.concatenate([gamma[1:][::-1], gamma])
    psi = latent_psi(nodes, spec.latent_cutoff)

    # p(z, theta) per (cell, node); negative anywhere on the grid is a
    # model violation, not a data problem
    coef_nodes = beta[:, None] + gamma[:, None] * psi[None, :]
    if np.any(coef_nodes < 0):
        bad_k, bad_i = np.unravel_index(np.argmin(coef_nodes), coef_nodes.shape)
        raise ModelEvaluationError(
            f"latent selection probability negative in cell {bad_k} at "
            f"theta={nodes[bad_i]:.4g} (value {coef_nodes[bad_k, bad_i]:.4g})"
        )

    def one_side(z, zr):
        cells = pm.cell_index(z)
        log_p = np.log(coef_nodes[cells, :])  # (n, M), -inf where p = 0
        quad = _gaussian_pair_logsum_matrix(z, zr, data.relsd, nodes)
        return logsumexp(quad + log_p + log_w[None, :], axis=1)

    with np.errstate(divide="ignore"):
        log_num = one_side(data.z, data.zr)
        if np.any(data.folded):
            flip = one_side(-data.z, -data.zr)
            log_num = np.where(data.folded, np.logaddexp(log_num, flip), log_num)

    cellprob = _cell_probabilities(np.asarray(pm.cutoffs), nodes)  # (M, K)
    epp_nodes = np.einsum("mk,km->m", cellprob, coef_nodes)
    log_den = np.log(float(np.dot(weights, epp_nodes)))
    return log_num - log_den


def _gaussian_pair_logsum_matrix(z, zr, relsd, nodes):
    """Log joint normal density of (z, zr) at each node, as an (n, M) matrix."""
    prec = 1.0 + 1.0 / relsd**2
    m = (z + zr / relsd**2) / prec
    const = z**2 + zr**2 / relsd**2 - prec * m**2
    expo = nodes[None, :] - m[:, None]
    expo *= expo
    expo *= -0.5 * prec[:, None]
    expo += (-0.5 * const - 2.0 * _LOG_SQRT2PI - np.log(relsd))[:, None]
    return expo


def latent_replication_loglik(records: Sequence[StudyRecord], spec: ModelSpec,
                              n_nodes: int = 201) -> float:
    """Replication likelihood with p(z, theta) = beta_k + gamma_k * Psi(theta).

    The theta-dependent probability enters both the numerator (inside the
    theta integral) and the denominator's average publication probability.
    gamma = 0 reduces exactly to :func:`replication_loglik`.
    """
    if spec.kind != "replication" or not spec.is_latent:
        raise InputError("spec must have kind='replication' and latent_gamma set")
    data = pack_replication(records)
    terms = _latent_replication_terms(data, spec, n_nodes)
    _warn_zero_density(data.ids, terms)
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# Dispatch helpers
# ---------------------------------------------------------------------------

def loglik_terms(records: Sequence[StudyRecord], spec: ModelSpec,
                 n_nodes: int = 201) -> np.ndarray:
    """Per-record log densities under whichever likelihood the spec selects."""
    if spec.kind == "metastudy":
        return _metastudy_terms(pack_metastudy(records), spec, n_nodes)
    data = pack_replication(records)
    if spec.is_latent:
        return _latent_replication_terms(data, spec, n_nodes)
    return _replication_terms(data, spec, n_nodes)


def loglik(records: Sequence[StudyRecord], spec: ModelSpec,
           n_nodes: int = 201) -> float:
    if spec.kind == "metastudy":
        return metastudy_loglik(records, spec, n_nodes)
    if spec.is_latent:
        return latent_replication_loglik(records, spec, n_nodes)
    return replication_loglik(records, spec, n_nodes)
