"""Maximum-likelihood fitting, robust covariance, and specification tests.

Positive parameters (gamma shape/scale, spreads, selection coefficients) are
optimized on the log scale; locations and latent-selection coefficients on the
identity scale.  Standard errors come from the usual sandwich A^-1 B A^-1 on
the original scale via the delta method, with per-record scores optionally
summed within clusters.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import chi2

from .likelihood import (
    MetaStudyData,
    ModelSpec,
    ReplicationData,
    _latent_replication_terms,
    _metastudy_terms,
    _replication_terms,
    pack_metastudy,
    pack_replication,
)
from .model import (
    EffectDistribution,
    GammaAbs,
    InputError,
    Normal,
    PointMass,
    SelectionFunction,
    StudyRecord,
    TLocationScale,
)

__all__ = [
    "ModelFit",
    "MetaRegressionResult",
    "ScoreTestResult",
    "fit_mle",
    "sandwich_vcov",
    "score_test_selection_on_theta",
    "meta_regression",
]

BETA_FLOOR = 1e-6
NU_FLOOR = 0.2


# ---------------------------------------------------------------------------
# Parameter transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Transform:
    """Map between internal (unconstrained) and original parameter scales."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]  # 'identity' | 'log' | 'shifted_log'

    def to_internal(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = np.empty_like(theta)
        for i, kind in enumerate(self.kinds):
            if kind == "identity":
                out[i] = theta[i]
            elif kind == "log":
                out[i] = math.log(theta[i])
            else:
                out[i] = math.log(theta[i] - NU_FLOOR)
        return out

    def to_original(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        for i, kind in enumerate(self.kinds):
            if kind == "identity":
                out[i] = u[i]
            elif kind == "log":
                out[i] = math.exp(u[i])
            else:
                out[i] = NU_FLOOR + math.exp(u[i])
        return out

    def jacobian_diag(self, u: np.ndarray) -> np.ndarray:
        """d(original)/d(internal), diagonal."""
        u = np.asarray(u, dtype=float)
        out = np.ones_like(u)
        for i, kind in enumerate(self.kinds):
            if kind in ("log", "shifted_log"):
                out[i] = math.exp(u[i])
        return out


def _effect_layout(effect: EffectDistribution) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if isinstance(effect, GammaAbs):
        return ("kappa", "lambda"), ("log", "log")
    if isinstance(effect, TLocationScale):
        return ("theta_bar", "tau", "nu"), ("identity", "log", "shifted_log")
    if isinstance(effect, Normal):
        return ("theta_bar", "tau"), ("identity", "log")
    if isinstance(effect, PointMass):
        return ("theta_bar",), ("identity",)
    raise InputError(f"cannot fit effect family {type(effect).__name__}")


def _effect_from_params(template: EffectDistribution, params: np.ndarray) -> EffectDistribution:
    if isinstance(template, GammaAbs):
        return GammaAbs(shape=params[0], scale=params[1])
    if isinstance(template, TLocationScale):
        return TLocationScale(loc=params[0], scale=params[1], df=params[2])
    if isinstance(template, Normal):
        return Normal(loc=params[0], scale=params[1])
    if isinstance(template, PointMass):
        return PointMass(loc=params[0])
    raise InputError(f"cannot fit effect family {type(template).__name__}")


def _effect_param_values(effect: EffectDistribution) -> np.ndarray:
    if isinstance(effect, GammaAbs):
        return np.array([effect.shape, effect.scale])
    if isinstance(effect, TLocationScale):
        return np.array([effect.loc, effect.scale, effect.df])
    if isinstance(effect, Normal):
        return np.array([effect.loc, effect.scale])
    if isinstance(effect, PointMass):
        return np.array([effect.loc])
    raise InputError(f"cannot fit effect family {type(effect).__name__}")


# ---------------------------------------------------------------------------
# Model fit container
# ---------------------------------------------------------------------------

@dataclass
class ModelFit:
    """Fitted selection model with estimates, covariance, and diagnostics.

    ``theta_hat`` is on the original scale, ordered effect parameters first,
    then free selection coefficients (reference cell excluded), then latent
    coefficients when present.  ``gradient_norm`` is the norm of the gradient
    of the per-record average log-likelihood on the internal (transformed)
    scale.
    """

    spec: ModelSpec
    theta_hat: np.ndarray
    param_names: tuple[str, ...]
    vcov: Optional[np.ndarray]
    loglik: float
    converged: bool
    n_restarts_used: int
    gradient_norm: float
    n_obs: int
    n_nodes: int
    notes: tuple[str, ...] = ()
    _transform: _Transform = field(repr=False, default=None)
    _free_cells: tuple[int, ...] = field(repr=False, default=())
    _pinned_cells: tuple[int, ...] = field(repr=False, default=())

    @property
    def se(self) -> Optional[np.ndarray]:
        if self.vcov is None:
            return None
        return np.sqrt(np.diag(self.vcov))

    def beta_block(self) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Free selection coefficients and their covariance block."""
        idx = [i for i, n in enumerate(self.param_names) if n.startswith("beta[")]
        beta = self.theta_hat[idx]
        if self.vcov is None:
            return beta, None
        return beta, self.vcov[np.ix_(idx, idx)]

    def selection_with_beta(self, beta_free: np.ndarray) -> SelectionFunction:
        """Selection function with the free coefficients replaced."""
        coefs = list(self.spec.selection.coefficients)
        for cell, value in zip(self._free_cells, beta_free):
            coefs[cell] = float(value)
        return self.spec.selection.with_coefficients(coefs)


# ---------------------------------------------------------------------------
# Numerical derivatives
# ---------------------------------------------------------------------------

def _steps(u: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(np.abs(u), 1.0)


def _gradient(f: Callable[[np.ndarray], float], u: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    h = _steps(u, rel)
    g = np.empty_like(u)
    for i in range(len(u)):
        up, dn = u.copy(), u.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        g[i] = (f(up) - f(dn)) / (2.0 * h[i])
    return g


def _hessian(f: Callable[[np.ndarray], float], u: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    h = _steps(u, rel)
    p = len(u)
    hess = np.empty((p, p))
    f0 = f(u)
    for i in range(p):
        for j in range(i, p):
            if i == j:
                up, dn = u.copy(), u.copy()
                up[i] += h[i]
                dn[i] -= h[i]
                hess[i, i] = (f(up) - 2.0 * f0 + f(dn)) / h[i] ** 2
            else:
                pp, pm, mp, mm = u.copy(), u.copy(), u.copy(), u.copy()
                pp[[i, j]] += [h[i], h[j]]
                pm[i] += h[i]
                pm[j] -= h[j]
                mp[i] -= h[i]
                mp[j] += h[j]
                mm[[i, j]] -= [h[i], h[j]]
                hess[i, j] = hess[j, i] = (
                    f(pp) - f(pm) - f(mp) + f(mm)
                ) / (4.0 * h[i] * h[j])
    return hess


def _score_matrix(terms: Callable[[np.ndarray], np.ndarray], u: np.ndarray,
                  rel: float = 1e-5) -> np.ndarray:
    """Per-record score vectors (n, p) by central differences."""
    h = _steps(u, rel)
    cols = []
    for i in range(len(u)):
        up, dn = u.copy(), u.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        cols.append((terms(up) - terms(dn)) / (2.0 * h[i]))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _pack_for(spec: ModelSpec, records: Sequence[StudyRecord]):
    if spec.kind == "metastudy":
        return pack_metastudy(records)
    return pack_replication(records)


def _terms_packed(data, spec: ModelSpec, n_nodes: int) -> np.ndarray:
    if spec.kind == "metastudy":
        return _metastudy_terms(data, spec, n_nodes)
    if spec.is_latent:
        return _latent_replication_terms(data, spec, n_nodes)
    return _replication_terms(data, spec, n_nodes)


def _mom_effect_start(template: EffectDistribution, obs: np.ndarray,
                      noise_var: np.ndarray) -> np.ndarray:
    """Method-of-moments starting values ignoring selection."""
    if isinstance(template, GammaAbs):
        m = max(float(np.mean(np.abs(obs))), 0.05)
        s2 = max(float(np.mean(obs**2) - np.mean(noise_var)), 0.25 * m * m)
        kappa = 1.0 / (s2 / m**2 - 1.0) if s2 > m**2 * 1.01 else 2.0
        kappa = min(max(kappa, 0.05), 20.0)
        lam = m / kappa
        return np.array([kappa, lam])
    if isinstance(template, TLocationScale):
        loc = float(np.median(obs))
        q75, q25 = np.percentile(obs, [75, 25])
        scale = max(0.5 * (q75 - q25), 1e-3 * max(np.std(obs), 1e-6), 1e-8)
        return np.array([loc, scale, 2.0])
    if isinstance(template, Normal):
        loc = float(np.mean(obs))
        tau2 = max(float(np.var(obs) - np.mean(noise_var)), 0.01 * float(np.var(obs)) + 1e-10)
        return np.array([loc, math.sqrt(tau2)])
    if isinstance(template, PointMass):
        return np.array([float(np.mean(obs))])
    raise InputError(f"cannot fit effect family {type(template).__name__}")


def fit_mle(
    records: Sequence[StudyRecord],
    spec_template: ModelSpec,
    options: Optional[dict] = None,
) -> ModelFit:
    """Fit the selection model by maximum likelihood.

    The template fixes the data kind, cutoffs, and effect family; all effect
    parameters, non-reference selection coefficients, and latent coefficients
    (when ``latent_gamma`` is present) are freed.  Restarts are taken from a
    fixed seed-derived set; the fit stops early once two restarts agree to
    1e-5 in log-likelihood with a small gradient.  Cells containing no
    observations get their coefficient pinned at the transform floor with a
    warning note instead of an error.

    Options: ``seed`` (default 0), ``n_restarts`` (10), ``n_nodes`` (201),
    ``beta_transform`` ('log' or 'identity'), ``nm_maxfev``, ``bfgs_maxiter``,
    ``cluster`` (bool, cluster the returned vcov by cluster_id),
    ``compute_vcov`` (default True).
    """
    opts = dict(options or {})
    seed = int(opts.pop("seed", 0))
    n_restarts = int(opts.pop("n_restarts", 10))
    n_nodes = int(opts.pop("n_nodes", 201))
    beta_transform = opts.pop("beta_transform", "log")
    nm_maxfev = opts.pop("nm_maxfev", None)
    bfgs_maxiter = opts.pop("bfgs_maxiter", None)
    cluster = bool(opts.pop("cluster", False))
    compute_vcov = bool(opts.pop("compute_vcov", True))
    if opts:
        raise InputError(f"unknown fit options: {sorted(opts)}")
    if beta_transform not in ("log", "identity"):
        raise InputError("beta_transform must be 'log' or 'identity'")

    data = _pack_for(spec_template, records)
    n = data.n
    selection = spec_template.selection

    # free-parameter bookkeeping
    eff_names, eff_kinds = _effect_layout(spec_template.effect)
    counts = np.bincount(selection.cell_index(data.z), minlength=selection.n_cells)
    notes: list[str] = []
    free_cells, pinned_cells = [], []
    for k in range(selection.n_cells):
        if k == selection.reference_cell:
            continue
        if counts[k] == 0:
            pinned_cells.append(k)
            notes.append(
                f"cell {k} has no observations; coefficient pinned at {BETA_FLOOR:g}"
            )
        else:
            free_cells.append(k)
    if len(np.nonzero(counts)[0]) <= 1:
        notes.append("degenerate data: all observations fall in a single cell")

    gamma_cells = []
    if spec_template.is_latent:
        gamma_cells = [k for k in range(selection.n_cells)
                       if k != selection.reference_cell]

    names = list(eff_names)
    kinds = list(eff_kinds)
    for k in free_cells:
        names.append(f"beta[{k}]")
        kinds.append("log" if beta_transform == "log" else "identity")
    for k in gamma_cells:
        names.append(f"gamma[{k}]")
        kinds.append("identity")
    transform = _Transform(tuple(names), tuple(kinds))
    n_eff = len(eff_names)
    n_beta = len(free_cells)

    min_records = 2 * len(names)
    if n < min_records:
        raise InputError(
            f"need at least {min_records} records to fit {len(names)} parameters, got {n}"
        )

    def build_spec(theta: np.ndarray) -> ModelSpec:
        effect = _effect_from_params(spec_template.effect, theta[:n_eff])
        coefs = list(selection.coefficients)
        for cell, value in zip(free_cells, theta[n_eff:n_eff + n_beta]):
            coefs[cell] = float(value)
        for cell in pinned_cells:
            coefs[cell] = BETA_FLOOR
        sel = selection.with_coefficients(coefs)
        gamma = None
        if spec_template.is_latent:
            gvals = theta[n_eff + n_beta:]
            gamma = [0.0] * selection.n_cells
            for cell, value in zip(gamma_cells, gvals):
                gamma[cell] = float(value)
            gamma = tuple(gamma)
        return ModelSpec(
            kind=spec_template.kind,
            selection=sel,
            effect=effect,
            latent_gamma=gamma,
            latent_cutoff=spec_template.latent_cutoff,
        )

    def neg_mean_loglik(u: np.ndarray) -> float:
        theta = transform.to_original(u)
        if beta_transform == "identity" and np.any(theta[n_eff:n_eff + n_beta] <= 0):
            return 1e12
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                terms = _terms_packed(data, build_spec(theta), n_nodes)
        except (ValueError, FloatingPointError):
            return 1e12
        total = float(np.sum(terms))
        if not np.isfinite(total):
            return 1e12
        return -total / n

    # starting point: effect params by method of moments, coefficients at 1
    if spec_template.kind == "metastudy":
        obs, noise_var = data.x, data.sigma**2
    else:
        obs, noise_var = data.z, np.ones(n)
    theta0 = np.concatenate([
        _mom_effect_start(spec_template.effect, obs, noise_var),
        np.ones(n_beta),
        np.zeros(len(gamma_cells)),
    ])
    u0 = transform.to_internal(theta0)

    rng = np.random.default_rng(seed)
    starts = [u0]
    for _ in range(n_restarts - 1):
        starts.append(u0 + 0.5 * rng.standard_normal(len(u0)))

    if nm_maxfev is None:
        nm_maxfev = 400 * len(u0) if n < 5000 else 60 * len(u0)
    if bfgs_maxiter is None:
        bfgs_maxiter = 200 if n < 5000 else 80

    results: list[tuple[float, np.ndarray, float]] = []  # (neg mean ll, u, grad norm)
    used = 0
    for start in starts:
        used += 1
        nm = optimize.minimize(
            neg_mean_loglik, start, method="Nelder-Mead",
            options={"maxfev": nm_maxfev, "xatol": 1e-6, "fatol": 1e-12},
        )
        polish = optimize.minimize(
            neg_mean_loglik, nm.x, method="BFGS",
            jac=lambda u: _gradient(neg_mean_loglik, u),
            options={"gtol": 1e-9, "maxiter": bfgs_maxiter},
        )
        best_u = polish.x if polish.fun <= nm.fun else nm.x
        gnorm = float(np.linalg.norm(_gradient(neg_mean_loglik, best_u)))
        results.append((neg_mean_loglik(best_u), best_u, gnorm))
        if len(results) >= 2:
            ordered = sorted(results, key=lambda r: r[0])
            top_gap = abs(ordered[0][0] - ordered[1][0]) * n
            if top_gap < 1e-5 and ordered[0][2] < 1e-6:
                break

    results.sort(key=lambda r: r[0])
    best_negll, best_u, gradient_norm = results[0]
    agree = (
        len(results) >= 2
        and abs(results[0][0] - results[1][0]) * n < 1e-5
    )
    converged = bool(agree and gradient_norm < 1e-6)

    theta_hat = transform.to_original(best_u)
    fitted_spec = build_spec(theta_hat)
    fit = ModelFit(
        spec=fitted_spec,
        theta_hat=theta_hat,
        param_names=tuple(names),
        vcov=None,
        loglik=-best_negll * n,
        converged=converged,
        n_restarts_used=used,
        gradient_norm=gradient_norm,
        n_obs=n,
        n_nodes=n_nodes,
        notes=tuple(notes),
        _transform=transform,
        _free_cells=tuple(free_cells),
        _pinned_cells=tuple(pinned_cells),
    )
    if compute_vcov:
        try:
            fit.vcov = sandwich_vcov(fit, records, clustering=cluster, _force=True)
        except (InputError, np.linalg.LinAlgError) as exc:
            fit.notes = fit.notes + (f"vcov unavailable: {exc}",)
    return fit


# ---------------------------------------------------------------------------
# Sandwich covariance
# ---------------------------------------------------------------------------

def sandwich_vcov(
    fit: ModelFit,
    records: Sequence[StudyRecord],
    clustering: bool | Sequence | None = None,
    _force: bool = False,
) -> np.ndarray:
    """Robust (optionally clustered) covariance of the fitted parameters.

    A^-1 B A^-1 on the internal scale, mapped to the original scale by the
    delta method; A is the numerical Hessian of the total log-likelihood
    (central differences, relative step 1e-5), B the outer product of
    per-record scores, summed within clusters when ``clustering`` is truthy.
    """
    if not fit.converged and not _force:
        raise InputError("fit did not converge; pass a converged fit")
    data = _pack_for(fit.spec, records)
    transform = fit._transform
    u_hat = transform.to_internal(fit.theta_hat)
    template = fit.spec

    n_eff = len(_effect_layout(template.effect)[0])
    n_beta = len(fit._free_cells)

    def build(u: np.ndarray) -> ModelSpec:
        theta = transform.to_original(u)
        effect = _effect_from_params(template.effect, theta[:n_eff])
        coefs = list(template.selection.coefficients)
        for cell, value in zip(fit._free_cells, theta[n_eff:n_eff + n_beta]):
            coefs[cell] = float(value)
        sel = template.selection.with_coefficients(coefs)
        gamma = None
        if template.is_latent:
            gcells = [k for k in range(template.selection.n_cells)
                      if k != template.selection.reference_cell]
            gamma = [0.0] * template.selection.n_cells
            for cell, value in zip(gcells, theta[n_eff + n_beta:]):
                gamma[cell] = float(value)
            gamma = tuple(gamma)
        return ModelSpec(template.kind, sel, effect, gamma, template.latent_cutoff)

    def terms(u: np.ndarray) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return _terms_packed(data, build(u), fit.n_nodes)

    def total(u: np.ndarray) -> float:
        return float(np.sum(terms(u)))

    a_mat = _hessian(total, u_hat, rel=1e-5)
    scores = _score_matrix(terms, u_hat, rel=1e-5)

    if clustering is None or clustering is False:
        meat = scores.T @ scores
    else:
        labels = data.cluster if clustering is True else np.asarray(clustering)
        if len(labels) != data.n:
            raise InputError("clustering labels must match the record count")
        meat = np.zeros((scores.shape[1], scores.shape[1]))
        for lab in np.unique(labels):
            s = scores[labels == lab].sum(axis=0)
            meat += np.outer(s, s)

    eigvals, eigvecs = np.linalg.eigh(a_mat)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(eigvals))))
    if np.any(np.abs(eigvals) < tol):
        null_dir = eigvecs[:, int(np.argmin(np.abs(eigvals)))]
        worst = fit.param_names[int(np.argmax(np.abs(null_dir)))]
        raise InputError(
            f"singular Hessian: flat direction dominated by parameter {worst!r}"
        )
    a_inv = np.linalg.inv(a_mat)
    vcov_u = a_inv @ meat @ a_inv
    jac = transform.jacobian_diag(u_hat)
    vcov = vcov_u * np.outer(jac, jac)
    return 0.5 * (vcov + vcov.T)


# ---------------------------------------------------------------------------
# Score (LM) test of selection on the true effect
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreTestResult:
    statistic: float
    df: int
    p_value: float


def score_test_selection_on_theta(
    records: Sequence[StudyRecord],
    baseline_fit: ModelFit,
    n_nodes: Optional[int] = None,
) -> ScoreTestResult:
    """LM test of whether publication probability depends on the true effect.

    Embeds the fitted baseline replication model in the latent model with
    per-cell coefficients on a smooth function of theta, evaluates per-record
    scores at the restricted MLE (latent block at zero), and forms
    S' I^-1 S with outer-product information.  The degrees of freedom equal
    the number of non-reference cells.
    """
    spec = baseline_fit.spec
    if spec.kind != "replication" or spec.is_latent:
        raise InputError("baseline_fit must be a plain replication fit")
    if n_nodes is None:
        n_nodes = baseline_fit.n_nodes
    data = pack_replication(records)
    transform = baseline_fit._transform
    n_eff = len(_effect_layout(spec.effect)[0])
    n_beta = len(baseline_fit._free_cells)
    gamma_cells = [k for k in range(spec.selection.n_cells)
                   if k != spec.selection.reference_cell]
    df = len(gamma_cells)

    u_base = transform.to_internal(baseline_fit.theta_hat)
    u_full = np.concatenate([u_base, np.zeros(df)])

    def terms(u: np.ndarray) -> np.ndarray:
        theta = transform.to_original(u[:len(u_base)])
        effect = _effect_from_params(spec.effect, theta[:n_eff])
        coefs = list(spec.selection.coefficients)
        for cell, value in zip(baseline_fit._free_cells, theta[n_eff:n_eff + n_beta]):
            coefs[cell] = float(value)
        sel = spec.selection.with_coefficients(coefs)
        gamma = [0.0] * spec.selection.n_cells
        for cell, value in zip(gamma_cells, u[len(u_base):]):
            gamma[cell] = float(value)
        lat = ModelSpec("replication", sel, effect, tuple(gamma), spec.latent_cutoff)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return _latent_replication_terms(data, lat, n_nodes)

    scores = _score_matrix(terms, u_full, rel=1e-5)
    s = scores.sum(axis=0)
    info = scores.T @ scores
    try:
        stat = float(s @ np.linalg.solve(info, s))
    except np.linalg.LinAlgError as exc:
        raise InputError(f"singular outer-product information: {exc}") from exc
    if stat < 0:
        stat = 0.0
    return ScoreTestResult(statistic=stat, df=df, p_value=float(chi2.sf(stat, df)))


# ---------------------------------------------------------------------------
# Meta-regression diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetaRegressionResult:
    kind: str
    intercept: float
    slope: float
    se_intercept: float
    se_slope: float
    n: int
    n_clusters: int


def meta_regression(
    records: Sequence[StudyRecord],
    kind: Literal["XonSigma", "ZonInvSigma"],
    clustering: bool = True,
) -> MetaRegressionResult:
    """Funnel-style regression of X on sigma, or Z on 1/sigma.

    Under no selection the X-on-sigma slope is zero with intercept E[theta],
    and the Z-on-1/sigma intercept is zero with slope E[theta].  Refuses
    sign-normalized data, where these regressions are uninformative.
    """
    if any(r.sign_normalized for r in records):
        raise InputError("meta-regression is not valid on sign-normalized data")
    if len(records) < 3:
        raise InputError("need at least 3 records")
    x = np.array([r.x for r in records])
    sigma = np.array([r.sigma for r in records])
    if kind == "XonSigma":
        y, w = x, sigma
    elif kind == "ZonInvSigma":
        y, w = x / sigma, 1.0 / sigma
    else:
        raise InputError(f"unknown meta-regression kind {kind!r}")

    design = np.column_stack([np.ones_like(w), w])
    xtx_inv = np.linalg.inv(design.T @ design)
    coef = xtx_inv @ design.T @ y
    resid = y - design @ coef
    n, k = design.shape

    if clustering:
        labels = np.array([r.cluster_id for r in records])
        uniq = np.unique(labels)
        g = len(uniq)
        meat = np.zeros((k, k))
        for lab in uniq:
            sel = labels == lab
            s = design[sel].T @ resid[sel]
            meat += np.outer(s, s)
        # CR1 small-sample factor
        meat *= (g / (g - 1)) * ((n - 1) / (n - k))
        n_clusters = g
    else:
        meat = (design * (resid**2)[:, None]).T @ design
        meat *= n / (n - k)  # HC1
        n_clusters = n
    vcov = xtx_inv @ meat @ xtx_inv
    se = np.sqrt(np.diag(vcov))
    return MetaRegressionResult(
        kind=kind,
        intercept=float(coef[0]),
        slope=float(coef[1]),
        se_intercept=float(se[0]),
        se_slope=float(se[1]),
        n=n,
        n_clusters=n_clusters,
    )
