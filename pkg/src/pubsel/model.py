"""Core domain types: study records, step selection functions, effect distributions.

Selection functions are piecewise constant in the z-statistic, identified only
up to scale, so one cell is pinned to 1.  Effect distributions describe the
population of true effects across latent studies and carry their own
quadrature rules for integrals against them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import ndtr, roots_hermite, roots_legendre
from scipy.stats import gamma as gamma_dist
from scipy.stats import t as t_dist

__all__ = [
    "ModelEvaluationError",
    "NumericalIntegrationError",
    "InputError",
    "StudyRecord",
    "SelectionFunction",
    "EffectDistribution",
    "GammaAbs",
    "TLocationScale",
    "Normal",
    "PointMass",
    "FiniteMixture",
    "QuadratureRule",
    "constant_selection",
    "eval_selection",
    "expected_pub_prob",
    "marginal_latent_density",
    "norm_pdf",
    "norm_cdf",
    "norm_logpdf",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)
_LOG_SQRT2PI = 0.5 * math.log(2.0 * math.pi)


class ModelEvaluationError(ValueError):
    """A model object was asked to produce an invalid value (e.g. p < 0)."""


class NumericalIntegrationError(RuntimeError):
    """A quadrature did not reach its target tolerance."""

    def __init__(self, message: str, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


class InputError(ValueError):
    """Invalid user-supplied data or configuration."""


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / _SQRT2PI


def norm_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - _LOG_SQRT2PI


def norm_cdf(x):
    return ndtr(x)


# ---------------------------------------------------------------------------
# Study records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyRecord:
    """One published estimate, optionally paired with a replication.

    ``x`` and ``sigma`` are in outcome units; the z-statistic is ``x / sigma``.
    ``xr``/``sigmar`` hold the replication estimate and its standard error on
    the same outcome scale.  ``sign_normalized`` marks data where the sign of
    the original estimate was set positive (requires a symmetric selection
    function and folded densities downstream).
    """

    study_id: str
    x: float
    sigma: float
    cluster_id: Optional[str] = None
    xr: Optional[float] = None
    sigmar: Optional[float] = None
    covariates: Mapping[str, float] = field(default_factory=dict)
    sign_normalized: bool = False

    def __post_init__(self):
        if not np.isfinite(self.x):
            raise InputError(f"record {self.study_id!r}: x must be finite")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InputError(f"record {self.study_id!r}: sigma must be > 0")
        if (self.xr is None) != (self.sigmar is None):
            raise InputError(
                f"record {self.study_id!r}: xr and sigmar must be supplied together"
            )
        if self.sigmar is not None and not (np.isfinite(self.sigmar) and self.sigmar > 0):
            raise InputError(f"record {self.study_id!r}: sigmar must be > 0")
        if self.sign_normalized and self.x < 0:
            raise InputError(
                f"record {self.study_id!r}: sign-normalized records need x >= 0"
            )
        if self.cluster_id is None:
            object.__setattr__(self, "cluster_id", self.study_id)

    @property
    def z(self) -> float:
        return self.x / self.sigma

    @property
    def zr(self) -> Optional[float]:
        """Replication estimate on the original study's z scale."""
        if self.xr is None:
            return None
        return self.xr / self.sigma

    @property
    def rel_sigmar(self) -> Optional[float]:
        """Replication standard deviation relative to the original's."""
        if self.sigmar is None:
            return None
        return self.sigmar / self.sigma

    @property
    def has_replication(self) -> bool:
        return self.xr is not None


# ---------------------------------------------------------------------------
# Step selection functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionFunction:
    """Piecewise-constant relative publication probability over z cells.

    ``cutoffs`` are the K-1 interior cell boundaries (z units), strictly
    increasing; the implicit outer boundaries are -inf and +inf (0 and +inf
    when ``symmetric``, in which case cells are read off ``|z|``).
    ``coefficients`` are the K relative probabilities, with the entry at
    ``reference_cell`` fixed to 1.  Cell membership is left-closed /
    right-open: a point exactly at a cutoff belongs to the cell above it.

    ``covariate_offsets`` maps ``(covariate name, cell index)`` to an additive
    shift applied as ``offset * covariate_value`` on that cell's coefficient;
    the reference cell never takes offsets.
    """

    cutoffs: tuple[float, ...]
    coefficients: tuple[float, ...]
    reference_cell: int
    symmetric: bool = False
    covariate_offsets: Optional[Mapping[tuple[str, int], float]] = None

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cutoffs)
        coefs = tuple(float(b) for b in self.coefficients)
        object.__setattr__(self, "cutoffs", cuts)
        object.__setattr__(self, "coefficients", coefs)
        if len(coefs) != len(cuts) + 1:
            raise InputError(
                f"need {len(cuts) + 1} coefficients for {len(cuts)} cutoffs, got {len(coefs)}"
            )
        if any(b2 <= b1 for b1, b2 in zip(cuts, cuts[1:])):
            raise InputError("cutoffs must be strictly increasing")
        if self.symmetric and cuts and cuts[0] <= 0:
            raise InputError("symmetric selection needs strictly positive cutoffs")
        if not 0 <= self.reference_cell < len(coefs):
            raise InputError("reference_cell out of range")
        if coefs[self.reference_cell] != 1.0:
            raise InputError("coefficient at the reference cell must equal 1 exactly")
        if any(b < 0 for b in coefs):
            raise InputError("coefficients must be nonnegative")
        if self.covariate_offsets:
            for (name, k) in self.covariate_offsets:
                if not 0 <= k < len(coefs):
                    raise InputError(f"offset cell index {k} out of range")
                if k == self.reference_cell:
                    raise InputError(
                        f"offset ({name!r}, {k}) targets the reference cell"
                    )

    @property
    def n_cells(self) -> int:
        return len(self.coefficients)

    def cell_index(self, z) -> np.ndarray:
        """Cell containing each z (0-based), using |z| when symmetric."""
        z = np.abs(z) if self.symmetric else np.asarray(z, dtype=float)
        return np.searchsorted(np.asarray(self.cutoffs), z, side="right")

    def cell_coefficients(self, covariates: Optional[Mapping[str, float]] = None) -> np.ndarray:
        """Effective per-cell coefficients, with covariate offsets applied."""
        beta = np.array(self.coefficients, dtype=float)
        if self.covariate_offsets:
            if covariates is None:
                covariates = {}
            for (name, k), off in self.covariate_offsets.items():
                if name not in covariates:
                    raise InputError(f"covariate {name!r} required by selection offsets")
                beta[k] += off * float(covariates[name])
        return beta

    def mirrored(self) -> "SelectionFunction":
        """Expand symmetric cells on |z| into the equivalent cells on z.

        For symmetric selection with cutoffs (c_1 < ... < c_{K-1}) on |z| the
        result has cutoffs (-c_{K-1}, ..., -c_1, c_1, ..., c_{K-1}) and
        coefficients mirrored accordingly.  Asymmetric functions are returned
        unchanged.
        """
        if not self.symmetric:
            return self
        cuts = self.cutoffs
        coefs = self.coefficients
        new_cuts = tuple(-c for c in reversed(cuts)) + cuts
        new_coefs = tuple(reversed(coefs[1:])) + coefs
        new_ref = len(coefs) - 1 + self.reference_cell
        offsets = None
        if self.covariate_offsets:
            offsets = {}
            for (name, k), off in self.covariate_offsets.items():
                offsets[(name, len(coefs) - 1 + k)] = off
                if k > 0:
                    offsets[(name, len(coefs) - 1 - k)] = off
        # mirroring a valid function yields a valid one; skip re-validation so
        # deliberately rescaled (unnormalized) functions can mirror too
        return self._raw(new_cuts, new_coefs, new_ref, False, offsets)

    @classmethod
    def _raw(cls, cutoffs, coefficients, reference_cell, symmetric, covariate_offsets):
        obj = object.__new__(cls)
        object.__setattr__(obj, "cutoffs", tuple(cutoffs))
        object.__setattr__(obj, "coefficients", tuple(coefficients))
        object.__setattr__(obj, "reference_cell", reference_cell)
        object.__setattr__(obj, "symmetric", symmetric)
        object.__setattr__(obj, "covariate_offsets", covariate_offsets)
        return obj

    def with_coefficients(self, coefficients: Sequence[float]) -> "SelectionFunction":
        return replace(self, coefficients=tuple(float(b) for b in coefficients))

    def scaled(self, c: float) -> "SelectionFunction":
        """Multiply every coefficient by c > 0 (breaks the reference normalization).

        Only for scale-invariance checks; the result bypasses the
        reference-cell validation by moving the reference accordingly.
        """
        scaled = tuple(c * b for b in self.coefficients)
        return self._raw(self.cutoffs, scaled, self.reference_cell,
                         self.symmetric, self.covariate_offsets)


def constant_selection() -> SelectionFunction:
    """p identically 1 (no selection)."""
    return SelectionFunction(cutoffs=(), coefficients=(1.0,), reference_cell=0)


def eval_selection(
    p: SelectionFunction,
    z,
    covariates: Optional[Mapping[str, float]] = None,
) -> np.ndarray | float:
    """Publication probability (relative) at z-statistic z.

    Symmetric functions are read at |z|; a point exactly on a cutoff belongs
    to the cell above.  Raises :class:`ModelEvaluationError` when offsets
    drive a cell's effective probability negative.
    """
    beta = p.cell_coefficients(covariates)
    if np.any(beta < 0):
        bad = int(np.argmax(beta < 0))
        raise ModelEvaluationError(
            f"effective publication probability negative in cell {bad} "
            f"(value {beta[bad]:.6g})"
        )
    idx = p.cell_index(z)
    out = beta[idx]
    if np.isscalar(z) or np.ndim(z) == 0:
        return float(out)
    return out


def _cell_probabilities(cutpoints: np.ndarray, mean) -> np.ndarray:
    """P(N(mean,1) in each cell) for cells delimited by cutpoints.

    Returns an array with shape broadcast(mean).shape + (K,).
    """
    mean = np.asarray(mean, dtype=float)
    edges = np.concatenate(([-np.inf], cutpoints, [np.inf]))
    cdf = ndtr(edges - mean[..., None])
    return np.diff(cdf, axis=-1)


def expected_pub_prob(
    p: SelectionFunction,
    theta,
    sigma: float = 1.0,
    covariates: Optional[Mapping[str, float]] = None,
):
    """E[p(X*/sigma) | theta]: average publication probability of a latent study.

    Closed form: the z-statistic of a latent draw is N(theta/sigma, 1), so the
    expectation is sum_k beta_k * P(z in cell k).  Symmetric cells are expanded
    to their mirrored two-sided equivalents.  theta may be an array.
    """
    if sigma <= 0:
        raise InputError("sigma must be > 0")
    pm = p.mirrored()
    beta = pm.cell_coefficients(covariates)
    probs = _cell_probabilities(np.asarray(pm.cutoffs), np.asarray(theta, dtype=float) / sigma)
    out = probs @ beta
    if np.ndim(theta) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Effect distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights approximating integrals against an effect distribution."""

    nodes: np.ndarray
    weights: np.ndarray
    target_tolerance: float = 1e-8

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise InputError("nodes and weights must be 1-d arrays of equal length")
        if np.any(weights <= 0):
            raise InputError("quadrature weights must be positive")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def integrate(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, g(self.nodes)))


class EffectDistribution:
    """Distribution of true effects across latent studies.

    Subclasses implement a density, a sampler, and a quadrature rule
    approximating ``integral g(theta) d mu(theta)``.
    """

    def pdf(self, theta) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def quadrature(self, n_nodes: int = 201) -> QuadratureRule:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def plausible_scale(self) -> float:
        """Rough spread, used for default grids."""
        raise NotImplementedError

    def integrate(self, g: Callable[[np.ndarray], np.ndarray],
                  n_nodes: int = 201, tol: float = 1e-8,
                  max_doublings: int = 6) -> float:
        """Adaptive integral of g against the distribution.

        Doubles the node count until two successive estimates agree to
        relative ``tol``; raises :class:`NumericalIntegrationError` with the
        achieved error estimate if the budget runs out.
        """
        prev = self.quadrature(n_nodes).integrate(g)
        for _ in range(max_doublings):
            n_nodes *= 2
            cur = self.quadrature(n_nodes).integrate(g)
            err = abs(cur - prev) / max(abs(cur), 1e-300)
            if err < tol:
                return cur
            prev = cur
        raise NumericalIntegrationError(
            f"quadrature did not converge to {tol:g} (achieved {err:.3g})",
            achieved=err,
        )


@lru_cache(maxsize=32)
def _legendre_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=32)
def _hermite_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_hermite(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def _gauss_legendre(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    x, w = _legendre_nodes(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


@dataclass(frozen=True)
class GammaAbs(EffectDistribution):
    """|theta| ~ Gamma(shape, scale) with an independent random sign.

    The signed density is symmetric around zero; sign-normalized data only
    identify the |theta| part, which is exactly this gamma component.
    """

    shape: float
    scale: float

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise InputError("gamma shape and scale must be > 0")

    def pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        return 0.5 * gamma_dist.pdf(np.abs(theta), self.shape, scale=self.scale)

    def sample(self, rng, n):
        mag = rng.gamma(self.shape, self.scale, size=n)
        sign = rng.integers(0, 2, size=n) * 2 - 1
        return sign * mag

    def quadrature(self, n_nodes: int = 201) -> QuadratureRule:
        # CDF-quantile transform: Gauss-Legendre in u mapped through the gamma
        # quantile function keeps nodes on [0, Q(1 - 1e-10)] and tames the
        # density spike at 0 for shape < 1.  The far tail gets two plain
        # Legendre panels in magnitude space so integrands localized out there
        # still see finely spaced nodes.
        n_tail = max(n_nodes // 4, 16)
        u, w = _gauss_legendre(n_nodes, 0.0, 1.0 - 1e-3)
        mag = gamma_dist.ppf(u, self.shape, scale=self.scale)
        parts_m, parts_w = [mag], [w]
        qs = [1.0 - 1e-3, 1.0 - 1e-7, 1.0 - 1e-10]
        edges = gamma_dist.ppf(qs, self.shape, scale=self.scale)
        for lo, hi in zip(edges[:-1], edges[1:]):
            mag_t, w_t = _gauss_legendre(n_tail, lo, hi)
            parts_m.append(mag_t)
            parts_w.append(w_t * gamma_dist.pdf(mag_t, self.shape, scale=self.scale))
        mag = np.concatenate(parts_m)
        w = np.concatenate(parts_w)
        nodes = np.concatenate([-mag[::-1], mag])
        weights = np.concatenate([0.5 * w[::-1], 0.5 * w])
        return QuadratureRule(nodes=nodes, weights=weights)

    def mean(self):
        return 0.0

    def abs_mean(self) -> float:
        return self.shape * self.scale

    def plausible_scale(self):
        return self.scale * math.sqrt(self.shape + self.shape**2)


@dataclass(frozen=True)
class TLocationScale(EffectDistribution):
    """theta = loc + scale * t(df)."""

    loc: float
    scale: float
    df: float

    def __post_init__(self):
        if self.scale <= 0:
            raise InputError("t scale must be > 0")
        if self.df <= 0:
            raise InputError("t degrees of freedom must be > 0")

    def pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        return t_dist.pdf((theta - self.loc) / self.scale, self.df) / self.scale

    def sample(self, rng, n):
        return self.loc + self.scale * rng.standard_t(self.df, size=n)

    def quadrature(self, n_nodes: int = 201) -> QuadratureRule:
        # theta = loc + scale * tan(u) on (-pi/2, pi/2); for df near 1 the
        # transformed integrand is nearly flat, which keeps heavy tails honest.
        u, w = _gauss_legendre(n_nodes, -0.5 * math.pi, 0.5 * math.pi)
        tan_u = np.tan(u)
        nodes = self.loc + self.scale * tan_u
        weights = w * t_dist.pdf(tan_u, self.df) * (1.0 + tan_u**2)
        return QuadratureRule(nodes=nodes, weights=weights)

    def mean(self):
        if self.df <= 1:
            raise ModelEvaluationError("t mean undefined for df <= 1")
        return self.loc

    def plausible_scale(self):
        if self.df > 2:
            return self.scale * math.sqrt(self.df / (self.df - 2.0))
        return 10.0 * self.scale


@dataclass(frozen=True)
class Normal(EffectDistribution):
    """theta ~ N(loc, scale^2); scale = 0 degenerates to a point mass."""

    loc: float
    scale: float

    def __post_init__(self):
        if self.scale < 0:
            raise InputError("normal scale must be >= 0")

    def pdf(self, theta):
        if self.scale == 0:
            raise ModelEvaluationError("degenerate normal has no density")
        return norm_pdf((np.asarray(theta) - self.loc) / self.scale) / self.scale

    def sample(self, rng, n):
        return self.loc + self.scale * rng.standard_normal(n)

    def quadrature(self, n_nodes: int = 201) -> QuadratureRule:
        if self.scale == 0:
            return PointMass(self.loc).quadrature(n_nodes)
        x, w = _hermite_nodes(n_nodes)
        keep = w > 0  # far-out Hermite weights underflow for large node counts
        nodes = self.loc + math.sqrt(2.0) * self.scale * x[keep]
        weights = w[keep] / math.sqrt(math.pi)
        return QuadratureRule(nodes=nodes, weights=weights)

    def mean(self):
        return self.loc

    def plausible_scale(self):
        return max(self.scale, 1e-12)


@dataclass(frozen=True)
class PointMass(EffectDistribution):
    loc: float

    def pdf(self, theta):
        raise ModelEvaluationError("point mass has no Lebesgue density")

    def sample(self, rng, n):
        return np.full(n, self.loc, dtype=float)

    def quadrature(self, n_nodes: int = 201) -> QuadratureRule:
        return QuadratureRule(nodes=np.array([self.loc]), weights=np.array([1.0]))

    def integrate(self, g, n_nodes=201, tol=1e-8, max_doublings=6):
        return float(np.asarray(g(np.array([self.loc])))[0])

    def mean(self):
        return self.loc

    def plausible_scale(self):
        return 1e-12


@dataclass(frozen=True)
class FiniteMixture(EffectDistribution):
    weights: tuple[float, ...]
    components: tuple[EffectDistribution, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))
        if len(w) != len(self.components) or not w:
            raise InputError("mixture needs matching nonempty weights and components")
        if any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-12:
            raise InputError("mixture weights must be nonnegative and sum to 1")

    def pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = np.zeros_like(theta)
        for w, comp in zip(self.weights, self.components):
            out += w * comp.pdf(theta)
        return out

    def sample(self, rng, n):
        counts = rng.multinomial(n, self.weights)
        draws = [comp.sample(rng, k) for comp, k in zip(self.components, counts)]
        out = np.concatenate(draws) if draws else np.empty(0)
        rng.shuffle(out)
        return out

    def quadrature(self, n_nodes: int = 201) -> QuadratureRule:
        nodes, weights = [], []
        for w, comp in zip(self.weights, self.components):
            rule = comp.quadrature(n_nodes)
            nodes.append(rule.nodes)
            weights.append(w * rule.weights)
        return QuadratureRule(nodes=np.concatenate(nodes), weights=np.concatenate(weights))

    def mean(self):
        return sum(w * comp.mean() for w, comp in zip(self.weights, self.components))

    def plausible_scale(self):
        spread = max(abs(c.mean() - self.mean()) + c.plausible_scale()
                     for c in self.components)
        return max(spread, 1e-12)


def marginal_latent_density(mu: EffectDistribution, z, sigma: float = 1.0):
    """Density of the latent z-statistic: integral of phi(z - theta/sigma) d mu.

    Closed forms for point masses and normals; quadrature otherwise, with
    adaptive node doubling.  z may be an array.
    """
    if sigma <= 0:
        raise InputError("sigma must be > 0")
    z = np.asarray(z, dtype=float)
    if isinstance(mu, PointMass):
        out = norm_pdf(z - mu.loc / sigma)
    elif isinstance(mu, Normal):
        s = math.sqrt(1.0 + (mu.scale / sigma) ** 2)
        out = norm_pdf((z - mu.loc / sigma) / s) / s
    else:
        zcol = np.atleast_1d(z)[:, None]

        def integrand(theta):
            return norm_pdf(zcol - theta[None, :] / sigma)

        # vectorized adaptive doubling over the whole z batch; densities far
        # below the phi(0) bunching bound only need absolute accuracy
        n_nodes = 201
        rule = mu.quadrature(n_nodes)
        prev = integrand(rule.nodes) @ rule.weights
        tol, abs_floor = 1e-8, 1e-12
        for _ in range(5):
            n_nodes *= 2
            rule = mu.quadrature(n_nodes)
            cur = integrand(rule.nodes) @ rule.weights
            delta = np.abs(cur - prev)
            err = np.max(delta / np.maximum(np.abs(cur), abs_floor / tol))
            if err < tol:
                break
            prev = cur
        else:
            raise NumericalIntegrationError(
                f"marginal density quadrature did not converge (achieved {err:.3g})",
                achieved=float(err),
            )
        out = cur.reshape(np.shape(z)) if np.ndim(z) else cur[0]
    if np.ndim(z) == 0:
        return float(out)
    return out
