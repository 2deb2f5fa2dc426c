"""Tests for error norms, energy distributions and posterior statistics."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.rmfem.analysis import (
    BIMODALITY_THRESHOLD,
    SUMMARY_COLUMNS,
    batch_means_stderr,
    bimodality_coefficient,
    chain_diagnostics,
    convergence_slope,
    dual_cell_weights,
    energy_distribution,
    error_report,
    l2_error,
    posterior_summary,
    reference_energy,
    summary_frame,
)
from src.rmfem.fem import assemble_and_solve, reference_solution
from src.rmfem.field import ParamVector, reference_params
from src.rmfem.inverse import ChainConfig, LikelihoodSpec, PosteriorSamples
from src.rmfem.mesh import PerturbationScheme, strip_mesh_2d, uniform_mesh_1d
from src.rmfem.streams import StreamKey

# ============================================================
# Interpolation Error Tests
# ============================================================


class TestErrorReport:
    """Tests for the L2 / nodal error split."""

    def setup_method(self):
        self.params = reference_params()
        self.reference = reference_solution(self.params)

    def test_dual_cell_weights(self):
        """Test end nodes get h/2 and the weights sum to the domain length."""
        weights = dual_cell_weights(uniform_mesh_1d(10))
        assert weights[0] == pytest.approx(0.05)
        assert weights[5] == pytest.approx(0.1)
        assert weights.sum() == pytest.approx(1.0)

    def test_self_comparison(self):
        """Test the reference has no error against itself."""
        report = error_report(self.reference, self.reference)
        assert report.l2_error == 0.0
        assert report.nodal_error == 0.0
        assert report.zeta == 0.0
        assert report.eta == 1.0

    def test_quadrature_independent(self):
        """Test the L2 error does not change with more quadrature points."""
        coarse = assemble_and_solve(uniform_mesh_1d(10), self.params)
        assert l2_error(coarse, self.reference, 8) == pytest.approx(
            l2_error(coarse, self.reference, 12), rel=1e-10
        )

    def test_second_order_convergence(self):
        """Test the L2 error decays like h^2."""
        sizes = [10, 20, 40, 80]
        reports = [
            error_report(assemble_and_solve(uniform_mesh_1d(n), self.params), self.reference)
            for n in sizes
        ]
        slope = convergence_slope([r.h for r in reports], [r.l2_error for r in reports])
        assert slope == pytest.approx(2.0, abs=0.15)

    def test_interpolation_dominates(self):
        """Test the interpolation share of the error at h = 1/10."""
        report = error_report(assemble_and_solve(uniform_mesh_1d(10), self.params), self.reference)
        assert report.eta > 0.8
        assert report.zeta + report.eta == pytest.approx(1.0)

    def test_unit_kappa_nodally_exact(self):
        """Test the nodal error vanishes for kappa = 1."""
        params = ParamVector.zeros()
        report = error_report(
            assemble_and_solve(uniform_mesh_1d(10), params), reference_solution(params)
        )
        assert report.nodal_error < 1e-9
        assert report.l2_error > 1e-4

    def test_parameter_mismatch(self):
        """Test solutions for different parameters cannot be compared."""
        coarse = assemble_and_solve(uniform_mesh_1d(10), ParamVector.zeros())
        with pytest.raises(ValueError, match="mismatch"):
            error_report(coarse, self.reference)

    def test_2d_rejected(self):
        """Test the report is 1D only."""
        strip = assemble_and_solve(strip_mesh_2d(10), self.params)
        with pytest.raises(ValueError, match="1D"):
            error_report(strip, self.reference)


# ============================================================
# Energy Tests
# ============================================================


class TestEnergy:
    """Tests for total-energy distributions over random meshes."""

    def setup_method(self):
        self.params = reference_params()
        self.mesh = uniform_mesh_1d(10)
        self.scheme = PerturbationScheme.for_mesh(self.mesh)

    def test_reference_energy_2d(self):
        """Test the strip reference energy is scaled by the strip height."""
        assert reference_energy(self.params, 2) == pytest.approx(
            0.1 * reference_energy(self.params, 1)
        )

    def test_frozen_scheme(self):
        """Test undisplaced meshes reproduce the FEM energy."""
        frozen = PerturbationScheme.for_mesh(self.mesh, p=60.0)
        dist = energy_distribution(self.mesh, frozen, self.params, 5, StreamKey(0))
        np.testing.assert_allclose(dist.samples, dist.unperturbed, rtol=1e-13)

    def test_bias(self):
        """Test random-mesh energies stay below the reference; FEM sits in the upper tail."""
        dist = energy_distribution(self.mesh, self.scheme, self.params, 200, StreamKey(1))
        assert dist.samples.shape == (200,)
        assert np.all(dist.samples < dist.reference)
        assert dist.unperturbed >= np.percentile(dist.samples, 95)

    def test_executor_independent(self):
        """Test energies do not depend on how the solves are scheduled."""
        serial = energy_distribution(self.mesh, self.scheme, self.params, 12, StreamKey(2))
        with ThreadPoolExecutor(max_workers=4) as pool:
            pooled = energy_distribution(
                self.mesh, self.scheme, self.params, 12, StreamKey(2), pool
            )
        np.testing.assert_array_equal(serial.samples, pooled.samples)

    def test_frame_and_summary(self):
        """Test the CSV layout and summary keys."""
        dist = energy_distribution(self.mesh, self.scheme, self.params, 20, StreamKey(3))
        frame = dist.to_frame()
        assert list(frame.columns) == ["h", "sample_id", "energy"]
        assert frame["sample_id"].tolist() == list(range(20))
        summary = dist.summary()
        assert summary["median"] <= summary["p95"] <= summary["max"]
        assert summary["reference"] > summary["max"]

    def test_needs_samples(self):
        """Test zero samples are rejected."""
        with pytest.raises(ValueError):
            energy_distribution(self.mesh, self.scheme, self.params, 0, StreamKey(0))

    def test_2d_bias(self):
        """Test the strip energies stay below the scaled reference energy."""
        mesh = strip_mesh_2d(10)
        dist = energy_distribution(
            mesh, PerturbationScheme.for_mesh(mesh), self.params, 20, StreamKey(4)
        )
        assert np.all(dist.samples < dist.reference)


@pytest.mark.slow
class TestEnergyBiasFullScale:
    """Energy bias with 500 random meshes at every mesh size."""

    @pytest.mark.parametrize("n", [10, 20, 40])
    def test_bias(self, n):
        """Test every sample lies below the reference and the FEM energy sits in the upper tail."""
        mesh = uniform_mesh_1d(n)
        dist = energy_distribution(
            mesh, PerturbationScheme.for_mesh(mesh), reference_params(), 500, StreamKey(0, (n,))
        )
        assert np.all(dist.samples < dist.reference)
        assert dist.unperturbed >= np.percentile(dist.samples, 95)

    def test_medians_increase(self):
        """Test distributions move toward the reference with refinement."""
        medians = []
        for n in (10, 20, 40):
            mesh = uniform_mesh_1d(n)
            dist = energy_distribution(
                mesh, PerturbationScheme.for_mesh(mesh), reference_params(), 500, StreamKey(1)
            )
            medians.append(dist.summary()["median"])
        assert medians[0] < medians[1] < medians[2]


# ============================================================
# Posterior Statistics Tests
# ============================================================


class TestPosteriorStatistics:
    """Tests for summaries and chain diagnostics."""

    def setup_method(self):
        rng = np.random.default_rng(0)
        self.draws = rng.normal([1.0, 0.9, 0.25, 0.3], 0.01, size=(4000, 4))
        self.samples = PosteriorSamples(
            self.draws, 0.3, 0.5, ChainConfig(burn_in=10, samples=4000), LikelihoodSpec()
        )

    def test_posterior_summary(self):
        """Test mean, unbiased std and absolute error per parameter."""
        rows = posterior_summary(self.samples, reference_params())
        assert [r.param for r in rows] == ["xi1", "xi2", "xi3", "xi4"]
        assert rows[1].mean == pytest.approx(self.draws[:, 1].mean())
        assert rows[1].std == pytest.approx(self.draws[:, 1].std(ddof=1))
        assert rows[1].error == pytest.approx(abs(1.0 - self.draws[:, 1].mean()))

    def test_summary_frame(self):
        """Test the table layout has one row per method, h and parameter."""
        rows = posterior_summary(self.samples, reference_params())
        frame = summary_frame([("fem_1d", 0.1, rows), ("fem_1d", 0.05, rows)])
        assert list(frame.columns) == SUMMARY_COLUMNS
        assert len(frame) == 8

    def test_summary_dimension_mismatch(self):
        """Test draws must match the truth dimension."""
        samples = PosteriorSamples(
            self.draws[:, :2], 0.3, 0.5, ChainConfig(burn_in=1, samples=4000), LikelihoodSpec()
        )
        with pytest.raises(ValueError, match="columns"):
            posterior_summary(samples, reference_params())

    def test_bimodality(self):
        """Test the coefficient separates one and two well-separated modes."""
        rng = np.random.default_rng(1)
        single = rng.normal(size=5000)
        double = np.concatenate([rng.normal(-3, 0.5, 2500), rng.normal(3, 0.5, 2500)])
        assert bimodality_coefficient(single) < BIMODALITY_THRESHOLD
        assert bimodality_coefficient(double) > BIMODALITY_THRESHOLD

    def test_batch_means_iid(self):
        """Test batch means match sigma / sqrt(N) for independent draws."""
        x = np.random.default_rng(2).normal(size=100000)
        assert batch_means_stderr(x) == pytest.approx(1.0 / np.sqrt(100000), rel=0.3)

    def test_batch_means_too_short(self):
        """Test short chains are rejected."""
        with pytest.raises(ValueError):
            batch_means_stderr(np.zeros(60))

    def test_chain_diagnostics(self):
        """Test per-parameter standard errors and bimodality flags for pooled draws."""
        rng = np.random.default_rng(3)
        draws = self.draws.copy()
        draws[:2000, 0] = rng.normal(0.9, 0.01, 2000)
        draws[2000:, 0] = rng.normal(1.1, 0.01, 2000)
        rng.shuffle(draws)
        samples = PosteriorSamples(
            draws, 0.3, 0.5, ChainConfig(burn_in=10, samples=4000), LikelihoodSpec(), chains=2
        )
        diagnostics = chain_diagnostics(samples)
        assert list(diagnostics["mcse"]) == ["xi1", "xi2", "xi3", "xi4"]
        assert diagnostics["mcse"]["xi2"] == pytest.approx(0.01 / np.sqrt(4000), rel=0.3)
        assert diagnostics["bimodality"]["xi1"] > BIMODALITY_THRESHOLD
        assert diagnostics["bimodality"]["xi2"] < BIMODALITY_THRESHOLD

    def test_chain_diagnostics_short_chain(self):
        """Test short chains use fewer batches and tiny chains report nothing."""
        short = PosteriorSamples(
            self.draws[:30], 0.3, 0.5, ChainConfig(burn_in=1, samples=30), LikelihoodSpec()
        )
        assert len(chain_diagnostics(short)["mcse"]) == 4
        tiny = PosteriorSamples(
            self.draws[:3], 0.3, 0.5, ChainConfig(burn_in=1, samples=3), LikelihoodSpec()
        )
        assert chain_diagnostics(tiny) == {}
