import math

import numpy as np
import pytest

from pubsel.likelihood import (
    ModelSpec,
    latent_psi,
    latent_replication_loglik,
    loglik_terms,
    metastudy_loglik,
    replication_loglik,
)
from pubsel.model import (
    GammaAbs,
    InputError,
    ModelEvaluationError,
    Normal,
    PointMass,
    SelectionFunction,
    StudyRecord,
    constant_selection,
    expected_pub_prob,
    norm_pdf,
)
from pubsel.simulate import (
    FixedSigma,
    DiscreteSigma,
    ReplicationRule,
    SimConfig,
    records_from_frame,
    simulate,
)

PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def _pair_records(gen, n, mu_loc=1.0, relsd=1.0, folded=False):
    z = gen.normal(mu_loc, 1.3, n)
    zr = gen.normal(mu_loc, 1.3, n)
    recs = []
    for i, (a, b) in enumerate(zip(z, zr)):
        if folded:
            s = 1.0 if a >= 0 else -1.0
            a, b = s * a, s * b
        recs.append(StudyRecord(f"s{i}", x=float(a), sigma=1.0, xr=float(b),
                                sigmar=relsd, sign_normalized=folded))
    return recs


class TestReplicationLoglik:
    def test_point_mass_no_selection(self):
        rec = [StudyRecord("a", x=0.0, sigma=1.0, xr=0.0, sigmar=1.0)]
        spec = ModelSpec("replication", constant_selection(), PointMass(0.0))
        assert replication_loglik(rec, spec) == pytest.approx(2.0 * math.log(PHI0))

    def test_scale_invariance(self, p_fig1, rng):
        recs = _pair_records(np.random.default_rng(1), 60)
        spec = ModelSpec("replication", p_fig1, GammaAbs(0.5, 1.5))
        spec2 = ModelSpec("replication", p_fig1.scaled(2.0), GammaAbs(0.5, 1.5))
        assert abs(replication_loglik(recs, spec)
                   - replication_loglik(recs, spec2)) < 1e-10

    def test_folding_identity(self, p_fig1):
        # with symmetric p and symmetric mu the folded density is exactly twice
        # the unfolded one at the same point
        folded = _pair_records(np.random.default_rng(2), 50, folded=True)
        unfolded = [StudyRecord(r.study_id, x=r.x, sigma=1.0, xr=r.xr, sigmar=r.sigmar)
                    for r in folded]
        spec = ModelSpec("replication", p_fig1, GammaAbs(0.5, 1.5))
        lf = replication_loglik(folded, spec)
        lu = replication_loglik(unfolded, spec)
        assert lf - lu == pytest.approx(len(folded) * math.log(2.0), abs=1e-9)

    def test_missing_replication_is_input_error(self, p_fig1):
        recs = [StudyRecord("a", x=1.0, sigma=1.0)]
        spec = ModelSpec("replication", p_fig1, GammaAbs(1.0, 1.0))
        with pytest.raises(InputError, match="missing"):
            replication_loglik(recs, spec)

    def test_zero_density_warns_and_returns_minus_inf(self):
        p = SelectionFunction((1.96,), (0.0, 1.0), 1, symmetric=True)
        recs = [StudyRecord("dead", x=0.5, sigma=1.0, xr=0.2, sigmar=1.0)]
        spec = ModelSpec("replication", p, GammaAbs(1.0, 1.0))
        with pytest.warns(RuntimeWarning, match="dead"):
            assert replication_loglik(recs, spec) == -math.inf

    def test_swap_invariance_only_without_selection(self, p_fig1):
        recs = _pair_records(np.random.default_rng(3), 40)
        swapped = [StudyRecord(r.study_id, x=r.xr, sigma=1.0, xr=r.x, sigmar=1.0)
                   for r in recs]
        flat = ModelSpec("replication", constant_selection(), GammaAbs(0.5, 1.5))
        assert replication_loglik(recs, flat) == pytest.approx(
            replication_loglik(swapped, flat), rel=1e-12)
        sel = ModelSpec("replication", p_fig1, GammaAbs(0.5, 1.5))
        assert abs(replication_loglik(recs, sel)
                   - replication_loglik(swapped, sel)) > 1e-3

    def test_conditional_density_integrates_to_one(self, p_fig1):
        # double integral of f(z, zr) dz dzr over a wide grid, at relsd = 1.3
        spec = ModelSpec("replication", p_fig1, GammaAbs(0.7, 1.0))
        z = np.linspace(-12, 12, 241)
        zz, rr = np.meshgrid(z, z, indexing="ij")
        recs = [StudyRecord(f"g{i}", x=float(a), sigma=1.0, xr=float(b), sigmar=1.3)
                for i, (a, b) in enumerate(zip(zz.ravel(), rr.ravel()))]
        dens = np.exp(loglik_terms(recs, spec)).reshape(zz.shape)
        step = z[1] - z[0]
        assert float(dens.sum()) * step * step == pytest.approx(1.0, abs=1e-5)


class TestMetaStudyLoglik:
    def test_no_selection_random_effects_reduction(self):
        recs = [StudyRecord("a", x=0.7, sigma=0.5), StudyRecord("b", x=-0.3, sigma=1.25)]
        spec = ModelSpec("metastudy", constant_selection(), Normal(0.4, 0.8))
        expected = 0.0
        for r in recs:
            var = 0.8**2 + r.sigma**2
            expected += -0.5 * (r.x - 0.4) ** 2 / var - 0.5 * math.log(2 * math.pi * var)
        assert metastudy_loglik(recs, spec) == pytest.approx(expected, abs=1e-12)

    def test_scale_invariance(self, p_fig1):
        gen = np.random.default_rng(4)
        recs = [StudyRecord(f"s{i}", x=float(x), sigma=float(s))
                for i, (x, s) in enumerate(zip(gen.normal(0.3, 0.6, 50),
                                               gen.uniform(0.2, 1.5, 50)))]
        spec = ModelSpec("metastudy", p_fig1, Normal(0.2, 0.5))
        spec2 = ModelSpec("metastudy", p_fig1.scaled(0.25), Normal(0.2, 0.5))
        assert abs(metastudy_loglik(recs, spec)
                   - metastudy_loglik(recs, spec2)) < 1e-10

    def test_conditional_density_given_sigma_integrates_to_one(self, p_fig1):
        spec = ModelSpec("metastudy", p_fig1, Normal(0.3, 0.6))
        for sigma in (0.4, 1.0, 2.3):
            x = np.linspace(-14 * sigma - 10, 14 * sigma + 10, 4001)
            recs = [StudyRecord(f"g{i}", x=float(v), sigma=sigma)
                    for i, v in enumerate(x)]
            dens = np.exp(loglik_terms(recs, spec))
            assert np.trapezoid(dens, x) == pytest.approx(1.0, abs=1e-5)

    def test_cross_entropy_against_simulation(self):
        # oracle: E[log f(X, sigma)] over published draws, with the published
        # density written out by hand (normal effects have a closed latent law)
        mu_loc, mu_scale = 0.5, 0.7
        beta = 0.25
        sigmas = (0.5, 1.0, 2.0)
        p = SelectionFunction((1.96,), (beta, 1.0), 1, symmetric=True)
        cfg = SimConfig(mu=Normal(mu_loc, mu_scale), p=p,
                        sigma_dist=DiscreteSigma(sigmas),
                        n_published=1_000_000, seed=2024)
        recs = records_from_frame(simulate(cfg))
        spec = ModelSpec("metastudy", p, Normal(mu_loc, mu_scale))
        terms = loglik_terms(recs, spec)
        se = terms.std() / math.sqrt(len(terms))

        def raw_density(x, sigma):
            total_sd = math.sqrt(mu_scale**2 + sigma**2)
            lat = norm_pdf((x - mu_loc) / total_sd) / total_sd
            return np.where(np.abs(x / sigma) < 1.96, beta, 1.0) * lat

        entropies, masses = [], []
        for sigma in sigmas:
            grid = np.linspace(-30 * sigma, 30 * sigma, 60001)
            raw = raw_density(grid, sigma)
            mass = np.trapezoid(raw, grid)  # average publication probability
            f = raw / mass
            entropies.append(float(np.trapezoid(f * np.log(f), grid)))
            masses.append(mass)
        weights = np.asarray(masses) / np.sum(masses)  # P(sigma | published)
        oracle = float(weights @ np.asarray(entropies))
        assert terms.mean() == pytest.approx(oracle, abs=3 * se)


class TestLatentReplication:
    def test_gamma_zero_nests_baseline(self, p_fig1):
        recs = _pair_records(np.random.default_rng(5), 40, folded=True)
        base = ModelSpec("replication", p_fig1, GammaAbs(0.5, 1.5))
        lat = ModelSpec("replication", p_fig1, GammaAbs(0.5, 1.5),
                        latent_gamma=(0.0, 0.0))
        assert latent_replication_loglik(recs, lat) == replication_loglik(recs, base)

    def test_psi_limits(self):
        assert latent_psi(0.0) == pytest.approx(0.0, abs=1e-15)
        assert latent_psi(60.0) == pytest.approx(1.0, abs=1e-12)
        assert latent_psi(-60.0) == pytest.approx(1.0, abs=1e-12)

    def test_negative_latent_probability_raises(self, p_fig1):
        recs = _pair_records(np.random.default_rng(6), 10, folded=True)
        lat = ModelSpec("replication", p_fig1, GammaAbs(0.5, 1.5),
                        latent_gamma=(-0.2, 0.0))
        with pytest.raises(ModelEvaluationError, match="negative"):
            latent_replication_loglik(recs, lat)

    def test_latent_conditional_density_integrates_to_one(self, p_fig1):
        lat = ModelSpec("replication", p_fig1, GammaAbs(0.7, 1.0),
                        latent_gamma=(0.3, 0.0))
        z = np.linspace(-12, 12, 241)
        zz, rr = np.meshgrid(z, z, indexing="ij")
        recs = [StudyRecord(f"g{i}", x=float(a), sigma=1.0, xr=float(b), sigmar=1.0)
                for i, (a, b) in enumerate(zip(zz.ravel(), rr.ravel()))]
        dens = np.exp(loglik_terms(recs, lat)).reshape(zz.shape)
        step = z[1] - z[0]
        assert float(dens.sum()) * step * step == pytest.approx(1.0, abs=1e-5)

    def test_gamma_length_validated(self, p_fig1):
        with pytest.raises(InputError):
            ModelSpec("replication", p_fig1, GammaAbs(1, 1), latent_gamma=(0.1,))
        with pytest.raises(InputError):
            ModelSpec("replication", p_fig1, GammaAbs(1, 1), latent_gamma=(0.0, 0.5))
