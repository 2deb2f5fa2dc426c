"""Tests for observations, likelihoods and the Metropolis samplers."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from pydantic import ValidationError

from src.rmfem.analysis import (
    BIMODALITY_THRESHOLD,
    batch_means_stderr,
    bimodality_coefficient,
    convergence_slope,
)
from src.rmfem.elements import gauss_legendre
from src.rmfem.errors import ChainError
from src.rmfem.fem import assemble_and_solve, evaluate, reference_solution
from src.rmfem.field import ParamVector, reference_params
from src.rmfem.inverse import (
    ChainConfig,
    LikelihoodSpec,
    LikelihoodVariant,
    McwmPosterior,
    ObservationSet,
    PosteriorSamples,
    gaussian_log_likelihood,
    log_likelihood_fem,
    log_likelihood_mcwm,
    log_prior,
    metropolis_accept,
    observation_locations,
    posterior_mean_field,
    run_mwmc,
    run_posterior,
    run_rwm,
    synthesize_observations,
)
from src.rmfem.mesh import PerturbationScheme, displace, perturb, strip_mesh_2d, uniform_mesh_1d
from src.rmfem.streams import StreamKey

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def standard_normal(xi, stream):
    return float(-0.5 * xi @ xi)


def frozen_scheme(mesh):
    """Scheme whose displacements underflow to zero (h^60)."""
    return PerturbationScheme.for_mesh(mesh, p=60.0)


# ============================================================
# Observation Tests
# ============================================================


class TestObservations:
    """Tests for synthetic data generation."""

    def test_locations(self):
        """Test the four observation points in 1D and on the strip mid-line."""
        np.testing.assert_allclose(observation_locations(1), [0.2, 0.4, 0.6, 0.8])
        np.testing.assert_allclose(observation_locations(2)[:, 1], 0.05)

    def test_deterministic_per_seed(self):
        """Test the same seed reproduces the data and another seed does not."""
        a = synthesize_observations("1d", seed=3)
        b = synthesize_observations("1d", seed=3)
        c = synthesize_observations("1d", seed=4)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)
        assert a.generation_seed == 3

    def test_noise_level(self):
        """Test the data stay within a few noise levels of the reference solution."""
        obs = synthesize_observations("1d", seed=0, sigma_e=1e-5)
        clean = evaluate(reference_solution(reference_params()), obs.locations)
        assert np.all(np.abs(obs.values - clean) < 6e-5)

    def test_2d_reuses_1d_values(self):
        """Test the strip data carry the 1D values at mid-line locations."""
        line = synthesize_observations("1d", seed=1)
        strip = synthesize_observations("2d", seed=1)
        np.testing.assert_array_equal(strip.values, line.values)
        assert strip.dim == 2
        assert strip.locations.shape == (4, 2)

    def test_unknown_domain(self):
        """Test an unknown domain label is rejected."""
        with pytest.raises(ValueError, match="Unknown domain"):
            synthesize_observations("3d")

    def test_unsorted_locations(self):
        """Test observation locations must be sorted."""
        with pytest.raises(ValueError, match="sorted"):
            ObservationSet(np.array([0.4, 0.2]), np.array([0.0, 0.0]), 1e-5, 0)


# ============================================================
# Density Tests
# ============================================================


class TestDensities:
    """Tests for the prior and the likelihoods."""

    def setup_method(self):
        self.mesh = uniform_mesh_1d(10)
        self.obs = synthesize_observations("1d", seed=0)
        self.params = reference_params()

    def test_log_prior(self):
        """Test the standard normal log-density."""
        assert log_prior(ParamVector.zeros()) == pytest.approx(-2.0 * np.log(2.0 * np.pi))
        assert log_prior(ParamVector((1.0, 0, 0, 0))) == pytest.approx(
            -0.5 - 2.0 * np.log(2.0 * np.pi)
        )
        xi = np.array([0.3, -1.2, 0.5, 2.0])
        assert log_prior(xi) == pytest.approx(log_prior(-xi))

    def test_zero_residual_likelihood(self):
        """Test the normalizing constant at zero residual."""
        value = gaussian_log_likelihood(self.obs.values, self.obs)
        assert value == pytest.approx(-4.0 * (np.log(1e-5) + LOG_SQRT_2PI))

    def test_one_sigma_offset(self):
        """Test a one-sigma offset in one coordinate costs one half."""
        predicted = self.obs.values.copy()
        predicted[2] += 1e-5
        zero = gaussian_log_likelihood(self.obs.values, self.obs)
        assert gaussian_log_likelihood(predicted, self.obs) == pytest.approx(zero - 0.5)

    def test_fem_likelihood_needs_reference_mesh(self):
        """Test the deterministic likelihood refuses perturbed meshes."""
        perturbed = perturb(self.mesh, PerturbationScheme.for_mesh(self.mesh), StreamKey(0))
        with pytest.raises(ValueError, match="reference"):
            log_likelihood_fem(self.params, self.obs, perturbed)

    def test_fem_likelihood_chi_square(self):
        """Test the fine-mesh likelihood at the truth is consistent with pure noise."""
        fine = uniform_mesh_1d(1000)
        value = log_likelihood_fem(self.params, self.obs, fine)
        chi2 = -2.0 * (value + 4.0 * (np.log(1e-5) + LOG_SQRT_2PI))
        assert 0.0 <= chi2 < 18.47

    def test_mcwm_zero_displacement_equals_fem(self):
        """Test MCwM with M = 1 and a frozen scheme reproduces the FEM likelihood."""
        fem = log_likelihood_fem(self.params, self.obs, self.mesh)
        mcwm = log_likelihood_mcwm(
            self.params, self.obs, self.mesh, frozen_scheme(self.mesh), 1, StreamKey(0)
        )
        assert mcwm == pytest.approx(fem, rel=1e-12)

    def test_mcwm_constant_terms(self):
        """Test the log-mean of equal terms is the common value."""
        fem = log_likelihood_fem(self.params, self.obs, self.mesh)
        mcwm = log_likelihood_mcwm(
            self.params, self.obs, self.mesh, frozen_scheme(self.mesh), 5, StreamKey(0)
        )
        assert mcwm == pytest.approx(fem, rel=1e-12)

    def test_mcwm_stream_dependence(self):
        """Test the estimate is reproducible per stream and executor-independent."""
        scheme = PerturbationScheme.for_mesh(self.mesh)
        key = StreamKey(2, (7,))
        a = log_likelihood_mcwm(self.params, self.obs, self.mesh, scheme, 4, key)
        with ThreadPoolExecutor(max_workers=3) as pool:
            b = log_likelihood_mcwm(self.params, self.obs, self.mesh, scheme, 4, key, pool)
        c = log_likelihood_mcwm(self.params, self.obs, self.mesh, scheme, 4, key.child(1))
        assert a == b
        assert a != c

    def test_mcwm_needs_samples(self):
        """Test M must be positive."""
        with pytest.raises(ValueError):
            log_likelihood_mcwm(
                self.params, self.obs, self.mesh, frozen_scheme(self.mesh), 0, StreamKey(0)
            )


# ============================================================
# Configuration Tests
# ============================================================


class TestChainConfig:
    """Tests for chain and likelihood settings."""

    def test_defaults(self):
        """Test defaults come from the application settings."""
        config = ChainConfig()
        assert config.burn_in == 10000
        assert config.samples == 10000
        assert config.target_acceptance == 0.3
        assert config.initial_state == (0.0, 0.0, 0.0, 0.0)

    def test_invalid_target(self):
        """Test the acceptance target must lie in (0, 1)."""
        with pytest.raises(ValidationError):
            ChainConfig(target_acceptance=1.5)

    def test_non_finite_initial_state(self):
        """Test a non-finite start is rejected."""
        with pytest.raises(ValidationError):
            ChainConfig(initial_state=(0.0, float("inf"), 0.0, 0.0))

    def test_scaled(self):
        """Test scaling multiplies burn-in, samples and the adaptation window."""
        config = ChainConfig(burn_in=10000, samples=10000, adapt_interval=200).scaled(0.01)
        assert (config.burn_in, config.samples) == (100, 100)
        assert config.adapt_interval == 2
        assert ChainConfig(adapt_interval=200).scaled(0.001).adapt_interval == 1

    def test_likelihood_spec_needs_scheme(self):
        """Test stochastic likelihoods need a perturbation scheme."""
        with pytest.raises(ValueError, match="perturbation scheme"):
            LikelihoodSpec(LikelihoodVariant.MCWM, 10)
        with pytest.raises(ValueError):
            LikelihoodSpec(LikelihoodVariant.DETERMINISTIC_FEM, 0)


# ============================================================
# Sampler Tests
# ============================================================


class TestMetropolis:
    """Tests for the random walk Metropolis sampler."""

    def test_accept_rule(self):
        """Test uphill moves are always accepted and downhill ones by threshold."""
        assert metropolis_accept(0.0, 0.999)
        assert metropolis_accept(2.5, 0.999)
        assert metropolis_accept(np.log(0.5), 0.49)
        assert not metropolis_accept(np.log(0.5), 0.51)
        assert not metropolis_accept(-np.inf, 0.0)
        assert not metropolis_accept(float("nan"), 0.0)

    def test_standard_normal_target(self):
        """Test the sampler recovers a 4D standard normal."""
        config = ChainConfig(burn_in=5000, samples=200000, seed=1)
        samples = run_rwm(standard_normal, config)
        assert samples.draws.shape == (200000, 4)
        assert np.max(np.abs(samples.mean())) < 0.05
        assert np.max(np.abs(np.cov(samples.draws.T) - np.eye(4))) < 0.1
        assert 0.1 < samples.acceptance_ratio < 0.6

    def test_adaptation_reaches_target(self):
        """Test the tuned proposal scale lands near the acceptance target."""
        config = ChainConfig(burn_in=6000, samples=20000, initial_state=(0.0,), seed=2)
        samples = run_rwm(standard_normal, config)
        assert abs(samples.acceptance_ratio - 0.3) < 0.1
        assert samples.proposal_scale_final > 1.0

    def test_deterministic(self):
        """Test identical seeds give identical chains."""
        config = ChainConfig(burn_in=200, samples=500, seed=5)
        a = run_rwm(standard_normal, config)
        b = run_rwm(standard_normal, config)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_non_finite_start(self):
        """Test a start with zero posterior density fails immediately."""

        def impossible(xi, stream):
            return -np.inf

        with pytest.raises(ChainError, match="initial state"):
            run_rwm(impossible, ChainConfig(burn_in=10, samples=10))

    def test_metadata(self):
        """Test the recorded chain metadata."""
        samples = run_rwm(standard_normal, ChainConfig(burn_in=20, samples=30, seed=9))
        meta = samples.metadata()
        assert meta["chain_seed"] == 9
        assert meta["likelihood"]["variant"] == "deterministic_fem"
        assert meta["chains"] == 1
        assert set(meta) >= {"acceptance_ratio", "proposal_scale_final", "config"}

    def test_likelihood_streams_unique(self):
        """Test the start, candidate and refresh estimates never share a stream."""
        paths = []

        class Recording:
            refresh_current = True

            def __call__(self, xi, stream):
                paths.append(stream.path)
                return standard_normal(xi, stream)

        run_rwm(Recording(), ChainConfig(burn_in=5, samples=5, seed=4))
        assert len(paths) == 1 + 10 + 9
        assert len(set(paths)) == len(paths)
        assert paths[0][-2:] == (0, 2)


class TestPosteriorSamplers:
    """Tests for the FEM, MCwM and MwMC posterior samplers."""

    def setup_method(self):
        self.mesh = uniform_mesh_1d(10)
        self.obs = synthesize_observations("1d", seed=0)
        self.config = ChainConfig(burn_in=30, samples=40, seed=3)

    def test_fem_chain(self):
        """Test the FEM posterior chain returns the requested draws."""
        samples = run_posterior(self.obs, self.mesh, LikelihoodSpec(), self.config)
        assert samples.draws.shape == (40, 4)
        assert samples.likelihood.variant is LikelihoodVariant.DETERMINISTIC_FEM

    def test_mcwm_frozen_scheme_matches_fem(self):
        """Test MCwM with zero displacement reproduces the FEM chain."""
        fem = run_posterior(self.obs, self.mesh, LikelihoodSpec(), self.config)
        spec = LikelihoodSpec(LikelihoodVariant.MCWM, 1, frozen_scheme(self.mesh))
        mcwm = run_posterior(self.obs, self.mesh, spec, self.config)
        np.testing.assert_array_equal(mcwm.draws, fem.draws)

    def test_mcwm_executor_independent(self):
        """Test MCwM chains do not depend on how mesh solves are scheduled."""
        spec = LikelihoodSpec(LikelihoodVariant.MCWM, 3, PerturbationScheme.for_mesh(self.mesh))
        serial = run_posterior(self.obs, self.mesh, spec, self.config)
        with ThreadPoolExecutor(max_workers=3) as pool:
            pooled = run_posterior(self.obs, self.mesh, spec, self.config, pool)
        np.testing.assert_array_equal(serial.draws, pooled.draws)

    def test_mwmc_pools_chains(self):
        """Test MwMC pools M chains of N draws."""
        scheme = PerturbationScheme.for_mesh(self.mesh)
        samples = run_mwmc(self.obs, self.mesh, scheme, 3, self.config)
        assert samples.draws.shape == (120, 4)
        assert samples.chains == 3
        assert samples.likelihood.variant is LikelihoodVariant.MWMC

    def test_mwmc_single_frozen_mesh_matches_fem(self):
        """Test MwMC with one undisplaced mesh behaves like the FEM chain on that mesh."""
        samples = run_mwmc(self.obs, self.mesh, frozen_scheme(self.mesh), 1, self.config)
        assert samples.draws.shape == (40, 4)
        assert np.all(np.isfinite(samples.draws))

    def test_scaled_fem_chain_adapts(self):
        """Test a chain shortened by the scale factor still tunes its proposal."""
        config = ChainConfig(
            burn_in=10000,
            samples=10000,
            adapt_interval=200,
            initial_state=reference_params().xi,
            seed=3,
        ).scaled(0.1)
        samples = run_posterior(self.obs, self.mesh, LikelihoodSpec(), config)
        assert 0.1 < samples.acceptance_ratio < 0.6
        assert samples.proposal_scale_final < 0.05

    def test_2d_chain(self):
        """Test the strip likelihood drives a short chain."""
        mesh = strip_mesh_2d(20)
        obs = synthesize_observations("2d", seed=0)
        spec = LikelihoodSpec(LikelihoodVariant.MCWM, 2, PerturbationScheme.for_mesh(mesh))
        samples = run_posterior(obs, mesh, spec, ChainConfig(burn_in=5, samples=5, seed=1))
        assert samples.draws.shape == (5, 4)

    def test_posterior_mean_field(self):
        """Test the predictive mean of identical draws is that draw's solution."""
        draws = np.tile(reference_params().array, (10, 1))
        samples = PosteriorSamples(draws, 0.3, 1.0, self.config, LikelihoodSpec())
        mean = posterior_mean_field(samples, self.mesh, max_solves=4)
        expected = assemble_and_solve(self.mesh, reference_params()).nodal_values
        np.testing.assert_allclose(mean, expected, rtol=1e-12)


# ============================================================
# Pseudo-marginal Exactness
# ============================================================


def _embed(xi):
    return ParamVector((float(xi[0]), 0.0, 0.0, 0.0))


@pytest.mark.slow
class TestPseudoMarginalExactness:
    """MCwM on a one-parameter, four-element problem against tensor quadrature."""

    def test_moments_match_quadrature(self):
        """Test posterior mean and std agree with the mesh-marginalized posterior."""
        mesh = uniform_mesh_1d(4)
        scheme = PerturbationScheme.for_mesh(mesh)
        locations = np.array([0.375, 0.625])
        truth = reference_solution(ParamVector((1.0, 0.0, 0.0, 0.0)), 200)
        obs = ObservationSet(locations, evaluate(truth, locations), 1e-2, 0)

        # node ranges (0.125, 0.375), (0.375, 0.625), (0.625, 0.875) never cover an observation
        points, weights = gauss_legendre(6)
        alpha = 0.5 * points
        grid = np.meshgrid(alpha, alpha, alpha, indexing="ij")
        meshes = [
            displace(mesh, scheme, [0.0, a1 * mesh.h, a2 * mesh.h, a3 * mesh.h, 0.0])
            for a1, a2, a3 in zip(*(g.ravel() for g in grid), strict=True)
        ]
        mesh_weights = (np.einsum("i,j,k->ijk", weights, weights, weights) / 8.0).ravel()

        theta = np.linspace(-3.0, 4.0, 351)
        log_post = np.empty_like(theta)
        for k, value in enumerate(theta):
            params = _embed([value])
            residuals = np.array(
                [evaluate(assemble_and_solve(m, params), locations) - obs.values for m in meshes]
            )
            loglik = -0.5 * np.sum((residuals / obs.sigma_e) ** 2, axis=1)
            peak = loglik.max()
            log_post[k] = -0.5 * value**2 + peak + np.log(mesh_weights @ np.exp(loglik - peak))
        step = theta[1] - theta[0]
        density = np.exp(log_post - log_post.max())
        density /= density.sum() * step
        exact_mean = float(np.sum(theta * density) * step)
        exact_std = float(np.sqrt(np.sum((theta - exact_mean) ** 2 * density) * step))

        target = McwmPosterior(obs, mesh, scheme, 10, carry_estimate=True, embed=_embed)
        config = ChainConfig(burn_in=5000, samples=50000, initial_state=(0.0,), seed=11)
        samples = run_rwm(target, config)
        chain = samples.draws[:, 0]
        stderr = batch_means_stderr(chain)

        assert abs(chain.mean() - exact_mean) < 3.0 * stderr
        assert abs(chain.std(ddof=1) - exact_std) < 3.0 * stderr + 0.05 * exact_std


# ============================================================
# Random-mesh Estimators
# ============================================================


@pytest.mark.slow
class TestRandomMeshEstimators:
    """Monte Carlo behaviour of the mesh-marginalized likelihood and the pooled sampler."""

    def setup_method(self):
        self.mesh = uniform_mesh_1d(10)
        self.scheme = PerturbationScheme.for_mesh(self.mesh)

    def test_mcwm_variance_shrinks_with_mesh_count(self):
        """Test the likelihood estimate's variance falls like 1/M on the natural scale."""
        obs = synthesize_observations("1d", seed=0, sigma_e=1e-3)
        params = reference_params()
        baseline = log_likelihood_fem(params, obs, self.mesh)
        sizes = (4, 16, 64)
        variances = []
        for count in sizes:
            estimates = [
                np.exp(
                    log_likelihood_mcwm(
                        params, obs, self.mesh, self.scheme, count, StreamKey(7, (count, r))
                    )
                    - baseline
                )
                for r in range(300)
            ]
            variances.append(np.var(estimates, ddof=1))
        assert convergence_slope(sizes, variances) == pytest.approx(-1.0, abs=0.2)

    def test_mwmc_pooled_posterior_is_multimodal(self):
        """Test pooling chains from separate random meshes gives a multimodal xi1 marginal."""
        obs = synthesize_observations("1d", seed=0)
        config = ChainConfig(
            burn_in=1500,
            samples=1000,
            adapt_interval=25,
            initial_state=reference_params().xi,
            seed=5,
        )
        samples = run_mwmc(obs, self.mesh, self.scheme, 3, config)
        assert bimodality_coefficient(samples.draws[:, 0]) > BIMODALITY_THRESHOLD
