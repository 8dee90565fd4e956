"""Step-function selection models for publication bias.

Estimate how publication probability depends on a study's z-statistic from
replication or meta-study data, test the specification, and produce
median-unbiased estimates and valid confidence intervals for individual
published studies under the estimated selection process.
"""
from .correct import (
    CorrectedInference,
    TwoSignalSelection,
    bias_coverage_curves,
    bonferroni_interval,
    conditional_quantile_unbiased,
    corrected_interval,
    nuisance_statistic,
    optimal_publication_threshold,
    posterior_density,
    quantile_unbiased,
    quantile_unbiased_many,
    truncated_cdf,
)
from .estimate import (
    MetaRegressionResult,
    ModelFit,
    ScoreTestResult,
    fit_mle,
    meta_regression,
    sandwich_vcov,
    score_test_selection_on_theta,
)
from .gmm import (
    GmmEstimate,
    MomentSystem,
    StockWrightSet,
    gmm_point_estimate,
    metastudy_pair_moment,
    replication_moment,
    simple_replication_moment,
    stock_wright_cs,
    stock_wright_statistic,
)
from .likelihood import (
    ModelSpec,
    latent_replication_loglik,
    loglik,
    metastudy_loglik,
    replication_loglik,
)
from .model import (
    EffectDistribution,
    FiniteMixture,
    GammaAbs,
    InputError,
    ModelEvaluationError,
    Normal,
    NumericalIntegrationError,
    PointMass,
    QuadratureRule,
    SelectionFunction,
    StudyRecord,
    TLocationScale,
    constant_selection,
    eval_selection,
    expected_pub_prob,
    marginal_latent_density,
)
from .simulate import (
    DiscreteSigma,
    FixedSigma,
    LogUniformSigma,
    ReplicationRule,
    SimConfig,
    replication_probability,
    records_from_frame,
    simulate,
    symmetry_diagnostic,
    z_density_diagnostics,
)

__version__ = "0.1.0"
