import math

import numpy as np
import pytest

from mh3d import physics, psfgen
from mh3d.physics import ScannerConfig
from mh3d.psfgen import (analytic_psf_1d, analytic_psf_3d, analytic_psf_stack,
                         compare_psf, fine_mesh_from_config,
                         harmonic_coefficient, simulate_psf, truncate_kernels,
                         verify_theorem1)

BETA = 200.0


def psf_config(gamma_a=0.3, fov_xy=40e-3, fov_z=32e-3, spp=24):
    return ScannerConfig(
        gradient_matrix=0.554 * np.diag([0.5, 0.5, 1.0]),
        drive_frequency=25e3,
        drive_amplitude=gamma_a / BETA,
        beta=BETA,
        magnetic_moment=1.0,
        sample_rate=25e3 * spp,
        shift_rate=25.0,
        z_slab_positions=(0.0,),
        fov=(fov_xy, fov_xy, fov_z),
        max_harmonic=8,
    )


@pytest.fixture(scope="module")
def sim_and_analytic():
    cfg = psf_config(gamma_a=0.3, fov_xy=24e-3, fov_z=28e-3)
    mesh = fine_mesh_from_config(cfg, dz=1e-3)
    sim = simulate_psf(cfg, [2, 3, 4], mesh)
    ana = analytic_psf_stack(cfg, [2, 3, 4], mesh)
    return cfg, mesh, sim, ana


class TestAnalytic1d:
    def test_parity(self):
        axis = np.linspace(-30e-3, 30e-3, 61)
        cfg = psf_config()
        k2 = analytic_psf_1d(2, cfg.gamma, cfg.excursion, axis)
        k3 = analytic_psf_1d(3, cfg.gamma, cfg.excursion, axis)
        assert np.allclose(k2, -k2[::-1], atol=1e-15)
        assert np.allclose(k3, k3[::-1], atol=1e-15)

    def test_k3_peak_at_origin(self):
        axis = np.linspace(-30e-3, 30e-3, 121)
        cfg = psf_config()
        k3 = analytic_psf_1d(3, cfg.gamma, cfg.excursion, axis)
        assert np.argmax(np.abs(k3)) == 60

    def test_coefficient_ratio(self):
        ga = 0.27
        assert harmonic_coefficient(ga, 3) / harmonic_coefficient(ga, 2) \
            == pytest.approx(ga / 2.0)

    def test_rejects_low_harmonic(self):
        with pytest.raises(ValueError):
            analytic_psf_1d(1, 100.0, 1e-3, np.zeros(3))


class TestAnalytic3d:
    def test_on_axis_matches_1d(self, sim_and_analytic):
        cfg, mesh, _, ana = sim_and_analytic
        cx, cy = mesh.shape[0] // 2, mesh.shape[1] // 2
        z = mesh.axis(2)
        for k in (2, 3, 4):
            profile_3d = ana.kernels[k]["z"][cx, cy, :]
            profile_1d = analytic_psf_1d(k, cfg.gamma, cfg.excursion, z)
            err = np.linalg.norm(profile_3d - profile_1d) \
                / np.linalg.norm(profile_1d)
            assert err < 0.02

    def test_xy_inversion_symmetry(self, sim_and_analytic):
        _, _, _, ana = sim_and_analytic
        for k in (2, 3):
            kern = ana.kernels[k]["z"]
            assert np.allclose(kern, kern[::-1, ::-1, :],
                               atol=1e-9 * np.abs(kern).max())

    def test_decay_at_large_radius(self, sim_and_analytic):
        cfg, _, _, ana = sim_and_analytic
        peak = np.abs(ana.kernels[3]["z"]).max()
        far_mesh = physics.Mesh(shape=(3, 3, 3), spacing=(1e-3,) * 3,
                                origin=(0.2, 0.2, 0.2))
        far = analytic_psf_3d(3, cfg, far_mesh)
        assert np.abs(far).max() < 1e-3 * peak


class TestSimulatedKernels:
    def test_k2_odd_k3_even_along_z(self, sim_and_analytic):
        _, _, sim, _ = sim_and_analytic
        k2 = sim.kernels[2]["z"]
        k3 = sim.kernels[3]["z"]
        # parity along z about the origin plane, within pipeline tolerance
        assert np.linalg.norm(k2 + k2[:, :, ::-1]) < 0.02 * np.linalg.norm(k2)
        assert np.linalg.norm(k3 - k3[:, :, ::-1]) < 0.02 * np.linalg.norm(k3)

    def test_k3_central_main_lobe(self, sim_and_analytic):
        _, mesh, sim, _ = sim_and_analytic
        k3 = sim.kernels[3]["z"]
        peak = np.unravel_index(np.argmax(np.abs(k3)), k3.shape)
        center = tuple((n - 1) // 2 for n in mesh.shape)
        assert all(abs(p - c) <= 1 for p, c in zip(peak, center))

    def test_amplitude_ratio_scales_with_coefficients(self):
        # real sinusoidal drive halves each harmonic order relative to the
        # complex-exponential coefficients, so peak ratios follow
        # (gamma A / 2k) max|L^(k+1)| / max|L^(k)| at small drive
        cfg = psf_config(gamma_a=0.15, fov_xy=16e-3, fov_z=24e-3)
        mesh = fine_mesh_from_config(cfg, dz=1e-3)
        sim = simulate_psf(cfg, [2, 3, 4], mesh)
        zfine = np.linspace(-0.04, 0.04, 4001)
        for k in (2, 3):
            peak_k = np.abs(sim.kernels[k]["z"]).max()
            peak_k1 = np.abs(sim.kernels[k + 1]["z"]).max()
            lmax_k = np.abs(physics.langevin_derivative(cfg.gamma * zfine, k)).max()
            lmax_k1 = np.abs(
                physics.langevin_derivative(cfg.gamma * zfine, k + 1)).max()
            predicted = (cfg.gamma_a / (2 * k)) * lmax_k1 / lmax_k
            assert peak_k1 / peak_k == pytest.approx(predicted, rel=0.2)

    def test_mesh_mismatch_rejected(self):
        cfg = psf_config()
        bad = physics.Mesh.centered((5, 5, 5), (2e-3, 2e-3, 1e-3))
        with pytest.raises(ValueError):
            simulate_psf(cfg, [2], bad)

    def test_coarse_mesh_warns(self):
        cfg = psf_config(fov_xy=8e-3, fov_z=8e-3)
        mesh = fine_mesh_from_config(cfg, dz=2e-3)
        with pytest.warns(UserWarning, match="coarse"):
            simulate_psf(cfg, [2], mesh)


class TestComparePsf:
    def test_identical_stacks_give_zero(self, sim_and_analytic):
        _, _, sim, _ = sim_and_analytic
        errs = compare_psf(sim, sim)
        assert all(v == pytest.approx(0.0, abs=1e-12) for v in errs.values())

    def test_agreement_at_low_amplitude(self, sim_and_analytic):
        _, _, sim, ana = sim_and_analytic
        errs = compare_psf(sim, ana)
        for k in (2, 3, 4):
            assert errs[k] < 0.10

    def test_error_grows_with_drive_amplitude(self):
        sweep = []
        for ga in (0.3, 0.6, 1.2):
            cfg = psf_config(gamma_a=ga, fov_xy=16e-3, fov_z=24e-3)
            mesh = fine_mesh_from_config(cfg, dz=1e-3)
            sim = simulate_psf(cfg, [2, 3], mesh)
            ana = analytic_psf_stack(cfg, [2, 3], mesh)
            sweep.append(compare_psf(sim, ana))
        for k in (2, 3):
            errs = [s[k] for s in sweep]
            assert errs[0] < errs[1] < errs[2]

    def test_shape_mismatch_rejected(self, sim_and_analytic):
        cfg, _, sim, _ = sim_and_analytic
        other_mesh = fine_mesh_from_config(cfg, dz=2e-3)
        other = analytic_psf_stack(cfg, [2], other_mesh, refine=2)
        with pytest.raises(ValueError):
            compare_psf(sim, other)


class TestTruncation:
    def test_truncation_preserves_parity_and_records_tail(self, sim_and_analytic):
        _, _, sim, _ = sim_and_analytic
        trunc = truncate_kernels(sim, cutoff=1e-2)
        assert trunc.half_support is not None
        k2 = trunc.kernels[2]["z"]
        assert np.linalg.norm(k2 + k2[:, :, ::-1]) < 0.02 * np.linalg.norm(k2)
        for k in (2, 3, 4):
            tail = trunc.normalization[k]["tail_energy_z"]
            assert 0.0 <= tail < 0.05


class TestTheorem1:
    def test_low_amplitude_envelopes(self):
        cfg = psf_config()
        report = verify_theorem1(cfg, [0.1], k_max=4)
        assert report["max_error"] < 0.02

    def test_acceptance_band(self):
        cfg = psf_config()
        report = verify_theorem1(cfg, [0.05, 0.1, 0.3], k_max=5)
        assert report["max_error"] < 0.05

    def test_error_grows_toward_convergence_boundary(self):
        cfg = psf_config()
        low = verify_theorem1(cfg, [0.3], k_max=4)["max_error"]
        high = verify_theorem1(cfg, [2.9], k_max=4)["max_error"]
        assert high > low

    def test_drive_strength_bound_enforced(self):
        cfg = psf_config()
        with pytest.raises(ValueError):
            verify_theorem1(cfg, [3.5], k_max=3)

    def test_zero_shift_envelopes_constant(self):
        cfg = psf_config()
        gamma = cfg.gamma
        report = verify_theorem1(cfg, [0.2], k_max=4, shift_per_period=0.0,
                                 x0=-1.0 / gamma, return_envelopes=True)
        for (ga, k), env in report["envelopes"].items():
            assert np.allclose(env, env[0], rtol=1e-9)
            predicted = (2j * np.pi * cfg.magnetic_moment * cfg.drive_frequency
                         * harmonic_coefficient(ga, k)
                         * physics.langevin_derivative(1.0, k))
            assert env[0] == pytest.approx(predicted, rel=1e-6)


class TestTaylorExpansionRadius:
    @pytest.mark.parametrize("gamma_a_pos", [0.0, 1.0, 3.0])
    def test_partial_sums_converge_inside_and_diverge_outside(self, gamma_a_pos):
        # partial sums of h(a + b) = sum_k h^(k)(a) b^k / k! with
        # h(x) = L'(gamma x): term_k = L^(k+1)(gamma a) (gamma b)^k / k!.
        # Radius in gamma*b is sqrt((gamma a)^2 + pi^2); evaluated with
        # mpmath because float derivatives drown at high order.
        mp = pytest.importorskip("mpmath")
        k_top = 200
        mp.mp.dps = 80 + int(0.6 * k_top)

        a = mp.mpf(gamma_a_pos)
        radius = mp.sqrt(a**2 + mp.pi**2)

        def deriv(order):
            if a == 0:
                # exact series coefficients: L^(order)(0) = order! a_n
                if order % 2 == 0:
                    return mp.mpf(0)
                n = (order + 1) // 2
                coef = physics.langevin_series_coefficients(n)[n - 1]
                return mp.mpf(coef.numerator) / coef.denominator \
                    * mp.factorial(order)
            poly = physics.coth_derivative_polynomial(order)
            u = mp.coth(a)
            val = sum(c * u**i for i, c in enumerate(poly))
            return val - (-1) ** order * mp.factorial(order) / a ** (order + 1)

        derivs = [deriv(k + 1) for k in range(k_top + 1)]

        def terms(gb):
            return [abs(derivs[k] * gb**k / mp.factorial(k))
                    for k in range(k_top + 1)]

        inside = terms(0.95 * radius)
        outside = terms(1.05 * radius)
        assert max(inside[-20:]) < 0.02 * max(inside[:20])
        assert max(outside[-20:]) > 50 * max(outside[:20])


class TestMomentAnnihilation:
    def test_zeroth_moment_vanishes(self):
        # symmetric axis long enough that the polynomial tails of the odd
        # harmonics integrate out
        gamma = 1108.0
        dz = 0.5 / gamma
        axis = np.arange(-1001, 1002) * dz  # gamma z in [-500.5, 500.5]
        for k in range(2, 7):
            kern = analytic_psf_1d(k, gamma, 1e-3, axis)
            assert abs(np.sum(kern)) <= 1e-6 * np.abs(kern).max()

    def test_first_moment_vanishes_for_odd_parity(self):
        gamma = 1108.0
        dz = 0.5 / gamma
        axis = np.arange(-1001, 1002) * dz
        for k in (3, 5):
            kern = analytic_psf_1d(k, gamma, 1e-3, axis)
            moment = np.sum(axis * kern)
            assert abs(moment) <= 1e-6 * np.abs(kern).max() * axis.max()
