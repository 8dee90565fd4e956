import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pubsel.model import (
    FiniteMixture,
    GammaAbs,
    InputError,
    ModelEvaluationError,
    Normal,
    PointMass,
    SelectionFunction,
    StudyRecord,
    TLocationScale,
    constant_selection,
    eval_selection,
    expected_pub_prob,
    marginal_latent_density,
    norm_pdf,
)

PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


class TestEvalSelection:
    def test_outer_cell(self, p_fig1):
        assert eval_selection(p_fig1, 2.5) == 1.0

    def test_symmetry_reads_absolute_value(self, p_fig1):
        assert eval_selection(p_fig1, -1.0) == 0.1

    def test_boundary_point_belongs_to_upper_cell(self, p_fig1):
        assert eval_selection(p_fig1, 1.96) == 1.0

    def test_asymmetric_cells(self):
        p = SelectionFunction(cutoffs=(-1.96, 0.0, 1.96),
                              coefficients=(0.7, 0.3, 0.4, 1.0),
                              reference_cell=3)
        assert eval_selection(p, -2.0) == 0.7
        assert eval_selection(p, -1.96) == 0.3
        assert eval_selection(p, 0.0) == 0.4
        assert eval_selection(p, 5.0) == 1.0

    def test_covariate_offsets(self):
        p = SelectionFunction(cutoffs=(1.96,), coefficients=(0.1, 1.0),
                              reference_cell=1, symmetric=True,
                              covariate_offsets={("qje", 0): 0.2})
        assert eval_selection(p, 1.0, {"qje": 0.0}) == pytest.approx(0.1)
        assert eval_selection(p, 1.0, {"qje": 1.0}) == pytest.approx(0.3)
        with pytest.raises(InputError):
            eval_selection(p, 1.0, {})

    def test_negative_effective_probability_names_cell(self):
        p = SelectionFunction(cutoffs=(1.96,), coefficients=(0.1, 1.0),
                              reference_cell=1, symmetric=True,
                              covariate_offsets={("w", 0): -0.5})
        with pytest.raises(ModelEvaluationError, match="cell 0"):
            eval_selection(p, 1.0, {"w": 1.0})

    def test_reference_cell_must_be_one(self):
        with pytest.raises(InputError):
            SelectionFunction(cutoffs=(1.96,), coefficients=(0.1, 0.9),
                              reference_cell=1)


class TestExpectedPubProb:
    def test_constant_selection(self):
        assert expected_pub_prob(constant_selection(), 3.7, 0.4) == pytest.approx(1.0)

    def test_fig1_at_zero_closed_form(self, p_fig1):
        # 0.1 * P(|Z| < 1.96) + 1.0 * P(|Z| >= 1.96) at theta = 0
        inner = 0.9500042097035591
        assert expected_pub_prob(p_fig1, 0.0, 1.0) == pytest.approx(
            0.1 * inner + (1 - inner), abs=1e-12)
        assert expected_pub_prob(p_fig1, 0.0, 1.0) == pytest.approx(0.145, abs=5e-4)

    def test_fig1_at_zero_monte_carlo(self, p_fig1):
        # acceptance frequency of Bernoulli(p(Z*)) over 1e7 draws Z* ~ N(0, 1)
        gen = np.random.default_rng(7)
        z = gen.standard_normal(10_000_000)
        accept = gen.random(10_000_000) < np.where(np.abs(z) >= 1.96, 1.0, 0.1)
        se = accept.std() / math.sqrt(len(accept))
        assert abs(expected_pub_prob(p_fig1, 0.0, 1.0) - accept.mean()) < 3 * se

    def test_far_effect_all_mass_outer(self, p_fig1):
        assert expected_pub_prob(p_fig1, 10.0, 1.0) == pytest.approx(1.0, abs=1e-6)

    def test_scale_invariance_exact(self, p_fig1):
        base = expected_pub_prob(p_fig1, 0.7, 1.3)
        scaled = expected_pub_prob(p_fig1.scaled(3.0), 0.7, 1.3)
        assert scaled == pytest.approx(3.0 * base, rel=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(
        theta=st.floats(-8, 8),
        sigma=st.floats(0.1, 5),
        betas=st.lists(st.floats(0.01, 4), min_size=1, max_size=3),
    )
    def test_bounded_by_coefficient_range(self, theta, sigma, betas):
        coefs = tuple(betas) + (1.0,)
        cuts = tuple(-1.0 + 1.5 * i for i in range(len(betas)))
        p = SelectionFunction(cutoffs=cuts, coefficients=coefs,
                              reference_cell=len(coefs) - 1)
        value = expected_pub_prob(p, theta, sigma)
        assert min(coefs) - 1e-12 <= value <= max(coefs) + 1e-12


class TestMarginalLatentDensity:
    def test_point_mass(self):
        assert marginal_latent_density(PointMass(0.0), 0.0, 1.0) == pytest.approx(
            PHI0, abs=1e-14)

    def test_normal_convolution(self):
        # density of N(0, 2) at zero
        expected = 1.0 / math.sqrt(2.0 * math.pi * 2.0)
        assert marginal_latent_density(Normal(0.0, 1.0), 0.0, 1.0) == pytest.approx(
            expected, abs=1e-14)

    def test_gamma_against_monte_carlo(self):
        # kernel-free MC: average the normal pdf over effect draws
        mu = GammaAbs(1.0, 2.0)
        gen = np.random.default_rng(11)
        theta = mu.sample(gen, 10_000_000)
        vals = norm_pdf(1.0 - theta)
        se = vals.std() / math.sqrt(len(vals))
        assert abs(marginal_latent_density(mu, 1.0, 1.0) - vals.mean()) < 3 * se

    @pytest.mark.parametrize("mu", [
        PointMass(0.7),
        Normal(0.3, 1.4),
        GammaAbs(0.373, 2.153),
        GammaAbs(1.0, 0.2),
        TLocationScale(0.2, 1.0, 5.0),
        FiniteMixture((0.4, 0.6), (Normal(-1.0, 0.5), PointMass(1.5))),
    ])
    def test_density_integrates_to_one(self, mu):
        zs = np.linspace(-40.0, 40.0, 8001)
        dens = marginal_latent_density(mu, zs, 1.0)
        assert np.trapezoid(dens, zs) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("sigma", [1.0, 1.7, 4.0])
    @pytest.mark.parametrize("mu", [
        Normal(1.0, 1.0), GammaAbs(0.5, 1.5), PointMass(0.0),
        TLocationScale(0.0, 1.0, 4.0),
    ])
    def test_bunching_bound(self, mu, sigma):
        zs = np.linspace(-15.0, 15.0, 601)
        dens = marginal_latent_density(mu, zs, sigma)
        assert np.max(dens) <= PHI0 + 1e-10

    def test_density_normalizes_for_each_variant_quadrature(self):
        for mu in (GammaAbs(0.8, 1.0), TLocationScale(0.0, 0.5, 2.0),
                   Normal(0.0, 2.0), FiniteMixture((0.5, 0.5),
                                                   (GammaAbs(1.0, 1.0), Normal(0, 1)))):
            assert mu.integrate(lambda t: np.ones_like(t)) == pytest.approx(1.0, abs=1e-8)


class TestStudyRecord:
    def test_requires_positive_sigma(self):
        with pytest.raises(InputError):
            StudyRecord("s", x=1.0, sigma=0.0)

    def test_sign_normalized_requires_nonnegative_x(self):
        with pytest.raises(InputError):
            StudyRecord("s", x=-1.0, sigma=1.0, sign_normalized=True)

    def test_replication_fields_paired(self):
        with pytest.raises(InputError):
            StudyRecord("s", x=1.0, sigma=1.0, xr=0.5)

    def test_z_scale(self):
        rec = StudyRecord("s", x=3.0, sigma=1.5, xr=1.5, sigmar=3.0)
        assert rec.z == pytest.approx(2.0)
        assert rec.zr == pytest.approx(1.0)
        assert rec.rel_sigmar == pytest.approx(2.0)

    def test_cluster_defaults_to_study(self):
        assert StudyRecord("abc", x=0.0, sigma=1.0).cluster_id == "abc"
