import numpy as np
import pytest

from mh3d import solve
from mh3d.forward import apply_forward, build_dense_oracle, build_forward_model
from mh3d.portrait import PortraitGrid, PortraitStack, WindowSpec, \
    resolve_sign_ambiguity
from mh3d.solve import (NumericalError, SolverConfig, apply_tikhonov,
                        boundary_selector, laplacian_spectrum, objective,
                        reconstruct, stack_data_vector)
from test_forward import random_psf_stack


def small_model(shape=(6, 6, 6), harmonics=(2, 3), pad=1, seed=0,
                every=1):
    psfs = random_psf_stack(shape, harmonics=harmonics, seed=seed)
    slabs = tuple(psfs.mesh.axis(2))[::every]
    return build_forward_model(psfs, {"z": 1.0}, None, pad=pad,
                               slab_positions=slabs)


class TestTikhonov:
    def test_constant_annihilated(self):
        out = apply_tikhonov(np.full((5, 6, 7), 3.3))
        assert np.allclose(out, 0.0, atol=1e-13)

    def test_linear_ramp_interior(self):
        x = np.arange(8)[:, None, None] * np.ones((8, 8, 8))
        out = apply_tikhonov(x)
        assert np.allclose(out[1:-1, :, :], 0.0, atol=1e-12)

    def test_spectral_normal_matches_stencil_composition(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 7, 8))
        spec = laplacian_spectrum(x.shape)
        spectral = solve._tikhonov_normal(x, spec)
        stencil = apply_tikhonov(apply_tikhonov(x))
        assert np.allclose(spectral, stencil, rtol=1e-10,
                           atol=1e-10 * np.abs(stencil).max())


class TestBoundarySelector:
    def test_counting_4x4x4(self):
        mask = boundary_selector((4, 4, 4), 1)
        assert mask.sum() == 56

    def test_margin_covering_everything(self):
        assert boundary_selector((4, 4, 4), 2).all()
        assert boundary_selector((4, 4, 4), 7).all()

    def test_partition(self):
        mask = boundary_selector((6, 7, 8), 2)
        inner = ~mask
        assert mask.sum() + inner.sum() == 6 * 7 * 8
        assert inner[2:-2, 2:-2, 2:-2].all()

    def test_margin_validation(self):
        with pytest.raises(ValueError):
            boundary_selector((4, 4, 4), 0)


class TestObjective:
    def test_zero_everything(self):
        model = small_model()
        scfg = SolverConfig(lam=0.5, alpha=2.0)
        val = objective(np.zeros(model.padded_shape),
                        np.zeros(model.data_shape), model, scfg)
        assert val == 0.0

    def test_pure_data_fit_when_unregularized(self):
        model = small_model()
        rng = np.random.default_rng(1)
        rho = rng.standard_normal(model.padded_shape)
        d = rng.standard_normal(model.data_shape)
        val = objective(rho, d, model, SolverConfig(lam=0.0, alpha=0.0))
        fit = np.sum((apply_forward(model, rho) - d) ** 2)
        assert val == pytest.approx(fit, rel=1e-12)

    def test_objective_decreases_first_to_last(self):
        wins = 0
        trials = 20
        for seed in range(trials):
            model = small_model(seed=seed)
            rng = np.random.default_rng(100 + seed)
            d = rng.standard_normal(model.data_shape)
            scfg = SolverConfig(lam=0.1, alpha=1.0, max_iterations=40,
                                tolerance=0.0)
            res = reconstruct(d, model, scfg)
            if res.objective_trace[-1] < res.objective_trace[0]:
                wins += 1
        assert wins >= 0.95 * trials


class TestGradient:
    def test_analytic_gradient_matches_finite_differences(self):
        model = small_model((8, 8, 8), pad=0)
        rng = np.random.default_rng(2)
        d = rng.standard_normal(model.data_shape)
        scfg = SolverConfig(lam=0.3, alpha=2.0, boundary_margin=2)
        spectrum = laplacian_spectrum(model.padded_shape)
        bmask = solve._boundary_mask_padded(model, scfg.boundary_margin)
        normal = solve._normal_operator(model, scfg, spectrum, bmask)
        atb = solve.apply_adjoint(model, d)
        rho = np.abs(rng.standard_normal(model.padded_shape))
        grad = 2.0 * (normal(rho) - atb)
        h = 1e-6
        for _ in range(10):
            v = rng.standard_normal(model.padded_shape)
            v /= np.linalg.norm(v)
            plus = objective(rho + h * v, d, model, scfg)
            minus = objective(rho - h * v, d, model, scfg)
            fd = (plus - minus) / (2 * h)
            analytic = float(np.sum(grad * v))
            assert fd == pytest.approx(analytic, rel=1e-5)


class TestReconstruct:
    def test_zero_data_returns_zero_image(self):
        model = small_model()
        res = reconstruct(np.zeros(model.data_shape), model, SolverConfig())
        assert not res.rho.any()
        assert res.converged

    def test_matches_dense_normal_equations(self):
        # unconstrained, lambda-only problem against a direct dense solve;
        # a delta-dominant kernel keeps the quadratic well conditioned so
        # the momentum iteration actually reaches 1e-6 in the budget
        psfs = random_psf_stack((6, 6, 6), harmonics=(2,), seed=3)
        for arr in psfs.kernels[2].values():
            arr *= 0.3
            arr[2, 2, 2] += 1.0
        model = build_forward_model(psfs, {"z": 1.0}, None, pad=1,
                                    slab_positions=tuple(psfs.mesh.axis(2)))
        rng = np.random.default_rng(4)
        d = rng.standard_normal(model.data_shape)
        lam = 0.5
        a = build_dense_oracle(model)
        n = model.padded_size()
        t = np.empty((n, n))
        e = np.zeros(model.padded_shape)
        flat = e.reshape(-1)
        for j in range(n):
            flat[j] = 1.0
            t[:, j] = apply_tikhonov(e).ravel()
            flat[j] = 0.0
        lhs = a.T @ a + lam * (t.T @ t)
        direct = np.linalg.solve(lhs, a.T @ d.ravel())
        scfg = SolverConfig(lam=lam, alpha=0.0, nonneg=False,
                            max_iterations=8000, tolerance=0.0)
        res = reconstruct(d, model, scfg)
        err = np.linalg.norm(res.rho_padded.ravel() - direct) \
            / np.linalg.norm(direct)
        assert err < 1e-6

    def test_projected_gradient_fixed_point(self):
        model = small_model((6, 6, 6), seed=5)
        rng = np.random.default_rng(6)
        truth = np.abs(rng.standard_normal(model.padded_shape))
        d = apply_forward(model, truth)
        scfg = SolverConfig(lam=1e-3, alpha=1.0, max_iterations=3000,
                            tolerance=0.0)
        res = reconstruct(d, model, scfg)
        spectrum = laplacian_spectrum(model.padded_shape)
        bmask = solve._boundary_mask_padded(model, scfg.boundary_margin)
        normal = solve._normal_operator(model, scfg, spectrum, bmask)
        atb = solve.apply_adjoint(model, d)
        rho = res.rho_padded
        step = rho - res.step_size * (normal(rho) - atb)
        moved = np.linalg.norm(rho - np.maximum(step, 0.0)) \
            / max(np.linalg.norm(rho), 1e-300)
        assert moved < 1e-5

    def test_deterministic_traces(self):
        model = small_model(seed=7)
        rng = np.random.default_rng(8)
        d = rng.standard_normal(model.data_shape)
        scfg = SolverConfig(lam=0.2, alpha=1.0, max_iterations=50,
                            tolerance=0.0)
        r1 = reconstruct(d, model, scfg)
        r2 = reconstruct(d, model, scfg)
        assert np.array_equal(r1.objective_trace, r2.objective_trace)
        assert np.array_equal(r1.rho, r2.rho)

    def test_heavy_regularization_drives_solution_to_zero(self):
        model = small_model(seed=9)
        rng = np.random.default_rng(10)
        truth = np.abs(rng.standard_normal(model.padded_shape))
        d = apply_forward(model, truth)
        small = reconstruct(d, model, SolverConfig(lam=1e-4, alpha=0.0,
                                                   max_iterations=200))
        huge = reconstruct(d, model, SolverConfig(lam=1e8, alpha=0.0,
                                                  max_iterations=200))
        assert np.linalg.norm(huge.rho) < 1e-3 * np.linalg.norm(small.rho)

    def test_iteration_budget_and_timing(self):
        model = small_model(seed=11)
        d = np.ones(model.data_shape)
        res = reconstruct(d, model, SolverConfig(max_iterations=7,
                                                 tolerance=0.0))
        assert res.iterations == 7
        assert len(res.iteration_seconds) == 7
        assert len(res.objective_trace) == 7

    def test_point_source_recovery(self):
        model = small_model((7, 7, 7), pad=1, seed=12)
        truth = np.zeros((7, 7, 7))
        truth[3, 3, 3] = 1.0
        d = apply_forward(model, truth)
        res = reconstruct(d, model, SolverConfig(lam=1e-6, alpha=0.0,
                                                 max_iterations=500))
        peak = np.unravel_index(np.argmax(res.rho), res.rho.shape)
        assert all(abs(p - 3) <= 1 for p in peak)


class TestStackDataVector:
    def test_missing_harmonic_rejected(self):
        model = small_model()
        with pytest.raises(ValueError):
            stack_data_vector({2: np.zeros(model.data_shape[1:])},
                              (2,), model)

    def test_ordering_follows_model(self):
        model = small_model(harmonics=(2, 3))
        nx, ny, ns = model.data_shape[1:]
        d2 = np.full((nx, ny, ns), 2.0)
        d3 = np.full((nx, ny, ns), 3.0)
        out = stack_data_vector({3: d3, 2: d2}, (2, 3), model)
        assert np.all(out[0] == 2.0)
        assert np.all(out[1] == 3.0)


class TestSignAmbiguity:
    def make_stack_and_model(self, flip=None, zero=False):
        model = small_model((6, 6, 6), harmonics=(2, 3), pad=1, seed=20)
        rng = np.random.default_rng(21)
        truth = np.zeros(model.padded_shape)
        idx = rng.integers(1, 5, size=(4, 3))
        for i, j, k in idx:
            truth[i + 1, j + 1, k + 1] = rng.uniform(0.5, 1.5)
        data = apply_forward(model, truth)
        if zero:
            data = np.zeros_like(data)
        stack_data = {k: data[i].copy() for i, k in enumerate(model.harmonics)}
        if flip:
            for k in flip:
                stack_data[k] = -stack_data[k]
        grid = PortraitGrid(6, 6, 1e-3, -2.5e-3, -2.5e-3)
        stack = PortraitStack(
            data=stack_data, harmonics=model.harmonics, grid=grid,
            z_positions=tuple(model.slab_positions), window=WindowSpec(),
            phase_angles={k: 0.0 for k in model.harmonics})
        return stack, model

    def test_correct_stack_unchanged(self):
        stack, model = self.make_stack_and_model()
        out, signs = resolve_sign_ambiguity(stack, model)
        assert all(s == 1 for s in signs.values())
        for k in stack.harmonics:
            assert np.array_equal(out.data[k], stack.data[k])

    def test_flipped_harmonic_restored(self):
        stack, model = self.make_stack_and_model(flip=(2,))
        reference, _ = self.make_stack_and_model()
        out, signs = resolve_sign_ambiguity(stack, model)
        assert signs[2] == -1
        assert np.allclose(out.data[2], reference.data[2])
        assert out.phase_angles[2] == pytest.approx(np.pi)

    def test_fully_flipped_stack_restored(self):
        stack, model = self.make_stack_and_model(flip=(2, 3))
        reference, _ = self.make_stack_and_model()
        out, signs = resolve_sign_ambiguity(stack, model)
        assert signs == {2: -1, 3: -1}
        for k in (2, 3):
            assert np.allclose(out.data[k], reference.data[k])

    def test_zero_stack_tie_flagged(self):
        stack, model = self.make_stack_and_model(zero=True)
        out, signs = resolve_sign_ambiguity(stack, model)
        assert all(s == 0 for s in signs.values())
        for k in stack.harmonics:
            assert np.array_equal(out.data[k], stack.data[k])
