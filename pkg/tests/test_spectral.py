"""Spectral core: independent oracles and invariant checks.

The advection oracle is a dense direct-summation convolution over mode pairs,
written without FFTs so it shares no code path with the implementation.
Norms are cross-checked against physical-space quadrature, which is exact for
trigonometric polynomials on a uniform grid.
"""

import numpy as np
import pytest

from ergoflow import (
    GalerkinCutoff,
    Grid,
    GridMismatchError,
    MeanZeroViolation,
    SpectralField,
    advect,
    biot_savart,
    curl,
    fractional_laplacian,
    galerkin_project,
    inner,
    leray_project,
    sobolev_norm,
)


def random_scalar(grid, rng, amplitude=1.0, dealiased=True, mean_zero=True):
    """Random real scalar field built in physical space."""
    vals = amplitude * rng.standard_normal(grid.shape)
    f = SpectralField.from_physical(grid, vals)
    if dealiased:
        f = SpectralField(grid, f.coeffs * grid.dealias_mask[None, :, :])
    if mean_zero:
        f = f.zero_mean()
    return f


def quadrature_inner(f, g):
    """Physical-space trapezoid rule; exact for band-limited fields."""
    fp, gp = f.to_physical(), g.to_physical()
    cell = (2.0 * np.pi / f.grid.modes_x) * (
        2.0 * np.pi / f.grid.modes_y if f.grid.modes_y > 1 else 1.0)
    return float(np.sum(fp * gp) * cell)


def dense_advection_oracle(vel, scalar, grid):
    """Direct summation of (u . grad s)^hat(k) = sum_{p+q=k} uhat(p) . (iq) shat(q).

    O(N^4) over the usable lattice, truncated by the same 2/3 rule afterwards.
    """
    nx, ny = grid.modes_x, grid.modes_y
    kxs = [int(k) for k in grid.kx if abs(k) < nx // 2]
    kys = [int(k) for k in grid.ky if abs(k) < ny // 2] if ny > 1 else [0]
    out = {}
    for px in kxs:
        for py in kys:
            up = (vel.coeffs[0, py % ny, px % nx], vel.coeffs[1, py % ny, px % nx])
            if up[0] == 0 and up[1] == 0:
                continue
            for qx in kxs:
                for qy in kys:
                    sq = scalar.coeffs[0, qy % ny, qx % nx]
                    if sq == 0:
                        continue
                    kx, ky = px + qx, py + qy
                    if abs(kx) > nx / 3.0 or abs(ky) > ny / 3.0:
                        continue
                    term = (up[0] * 1j * qx + up[1] * 1j * qy) * sq
                    key = (kx, ky)
                    out[key] = out.get(key, 0.0) + term
    result = np.zeros(grid.shape, dtype=complex)
    for (kx, ky), val in out.items():
        result[ky % ny, kx % nx] = val
    return result


class TestGrid:
    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            Grid(12, 12)
        with pytest.raises(ValueError):
            Grid(32, 6)

    def test_wavenumbers_are_integer_lattice(self):
        g = Grid(8, 8)
        assert sorted(g.kx.tolist()) == [-4, -3, -2, -1, 0, 1, 2, 3]
        assert g.k_sq[0, 1] == 1.0 and g.k_sq[1, 1] == 2.0

    def test_eigenvalue_list_32(self):
        # multiplicities on the integer lattice: 1 x4, 2 x4, 4 x4, 5 x8
        g = Grid(32, 32)
        expected = [1] * 4 + [2] * 4 + [4] * 4 + [5] * 8
        assert g.laplacian_eigenvalues()[:20].tolist() == expected

    def test_one_dimensional_grid(self):
        g = Grid(128, 1)
        assert g.dim == 1
        assert g.laplacian_eigenvalues()[:3].tolist() == [1, 1, 4]


class TestSpectralField:
    def test_physical_round_trip(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(7)
        f = random_scalar(g, rng)
        back = SpectralField.from_physical(g, f.to_physical())
        assert np.max(np.abs(back.coeffs - f.coeffs)) < 1e-14

    def test_hermitian_after_operations(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(8)
        f = random_scalar(g, rng)
        u = biot_savart(f)
        for fld in (f, u, fractional_laplacian(f, 1.3), advect(u, f)):
            assert fld.is_hermitian(1e-12)

    def test_single_mode_matches_cosine(self):
        g = Grid(16, 16)
        f = SpectralField.single_mode(g, (1, 0), 0.5)  # cos(x1)
        xx, _ = g.physical_coordinates()
        assert np.max(np.abs(f.to_physical()[0] - np.cos(xx))) < 1e-13

    def test_grid_mismatch_rejected(self):
        a = SpectralField.zeros(Grid(16, 16))
        b = SpectralField.zeros(Grid(32, 32))
        with pytest.raises(GridMismatchError):
            _ = a + b


class TestNorms:
    def test_sin_x1_l2_norm(self):
        # int_[0,2pi]^2 sin(x1)^2 = 2 pi^2
        g = Grid(32, 32)
        f = SpectralField.single_mode(g, (1, 0), -0.5j)  # sin(x1)
        assert abs(sobolev_norm(f, 0.0) - np.pi * np.sqrt(2.0)) < 1e-12

    def test_norm_matches_quadrature(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(9)
        for _ in range(10):
            f = random_scalar(g, rng, mean_zero=False)
            q = np.sqrt(quadrature_inner(f, f))
            assert abs(sobolev_norm(f, 0.0) - q) < 1e-12 * max(q, 1.0)

    def test_inner_matches_quadrature(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(10)
        f, h = random_scalar(g, rng), random_scalar(g, rng)
        assert abs(inner(f, h) - quadrature_inner(f, h)) < 1e-12

    def test_sobolev_weights(self):
        g = Grid(32, 32)
        f = SpectralField.single_mode(g, (3, 4), 1.0 + 0.2j)  # |k|^2 = 25
        r = sobolev_norm(f, 1.0) / sobolev_norm(f, 0.0)
        assert abs(r - 5.0) < 1e-12

    def test_negative_order_requires_mean_zero(self):
        g = Grid(16, 16)
        f = SpectralField.zeros(g)
        f.coeffs[0, 0, 0] = 1.0
        with pytest.raises(MeanZeroViolation):
            sobolev_norm(f, -1.0)
        with pytest.raises(MeanZeroViolation):
            fractional_laplacian(f, -0.5)


class TestFractionalLaplacian:
    def test_round_trip_identity(self):
        g = Grid(32, 32)
        rng = np.random.default_rng(11)
        f = random_scalar(g, rng)
        for s in (0.7, 1.0, 1.9):
            back = fractional_laplacian(fractional_laplacian(f, s), -s)
            err = np.max(np.abs(back.coeffs - f.coeffs))
            assert err < 1e-12 * np.max(np.abs(f.coeffs))

    def test_single_mode_eigenvalue(self):
        g = Grid(16, 16)
        f = SpectralField.single_mode(g, (1, 2), 1.0)
        out = fractional_laplacian(f, 1.5)
        assert np.allclose(out.coeffs, f.coeffs * 5.0 ** 0.75)


class TestBiotSavart:
    def test_sin_x1_example(self):
        # xi = sin(x1) -> u = (0, -cos(x1))
        g = Grid(16, 16)
        xi = SpectralField.single_mode(g, (1, 0), -0.5j)
        u = biot_savart(xi)
        xx, _ = g.physical_coordinates()
        up = u.to_physical()
        assert np.max(np.abs(up[0])) < 1e-13
        assert np.max(np.abs(up[1] + np.cos(xx))) < 1e-13

    def test_curl_inverts(self):
        g = Grid(32, 32)
        rng = np.random.default_rng(12)
        for _ in range(5):
            xi = random_scalar(g, rng)
            back = curl(biot_savart(xi))
            err = np.max(np.abs(back.coeffs - xi.coeffs))
            assert err < 1e-12 * np.max(np.abs(xi.coeffs))

    def test_divergence_free(self):
        g = Grid(32, 32)
        xi = random_scalar(g, np.random.default_rng(13))
        assert biot_savart(xi).divergence_norm() < 1e-13


class TestLeray:
    def test_divergence_free_unchanged(self):
        g = Grid(16, 16)
        u = biot_savart(random_scalar(g, np.random.default_rng(14)))
        v = leray_project(u)
        assert np.max(np.abs(v.coeffs - u.coeffs)) < 1e-14

    def test_pure_gradient_killed(self):
        # uhat(k) parallel to k at a single mode -> projected to zero
        g = Grid(16, 16)
        u = SpectralField.zeros(g, 2)
        u.coeffs[0, 0, 2] = 2.0
        u.coeffs[0, 0, -2] = 2.0
        u.coeffs[1, 0, 2] = 1.0
        u.coeffs[1, 0, -2] = 1.0
        # k = (2, 0): the x-component is the gradient part
        v = leray_project(u)
        assert np.max(np.abs(v.coeffs[0])) < 1e-14
        assert np.max(np.abs(v.coeffs[1] - u.coeffs[1])) < 1e-14

    def test_output_divergence_free(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(15)
        u = SpectralField.zeros(g, 2)
        for comp in range(2):
            u.coeffs[comp] = random_scalar(g, rng).coeffs[0]
        assert leray_project(u).divergence_norm() < 1e-12


class TestAdvect:
    def test_against_dense_convolution_oracle(self):
        g = Grid(8, 8)
        rng = np.random.default_rng(16)
        xi = random_scalar(g, rng)
        u = biot_savart(xi)
        theta = random_scalar(g, rng)
        got = advect(u, theta).coeffs[0]
        want = dense_advection_oracle(u, theta, g)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_skew_symmetry(self):
        # <u . grad xi, xi> = 0 for divergence-free u, dealiased product
        g = Grid(32, 32)
        rng = np.random.default_rng(17)
        for _ in range(20):
            xi = random_scalar(g, rng)
            u = biot_savart(random_scalar(g, rng))
            val = inner(advect(u, xi), xi)
            scale = sobolev_norm(u, 1.0) * sobolev_norm(xi, 1.0) ** 2 or 1.0
            assert abs(val) < 1e-10 * scale

    def test_rejects_compressible_velocity(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(18)
        u = SpectralField.zeros(g, 2)
        u.coeffs[0] = random_scalar(g, rng).coeffs[0]
        u.coeffs[1] = random_scalar(g, rng).coeffs[0]
        with pytest.raises(ValueError):
            advect(u, random_scalar(g, rng))

    def test_dealias_mask_applied(self):
        g = Grid(16, 16)
        rng = np.random.default_rng(19)
        out = advect(biot_savart(random_scalar(g, rng)), random_scalar(g, rng))
        assert np.all(out.coeffs[0][~g.dealias_mask] == 0.0)


class TestGalerkinCutoff:
    def test_partition_of_identity(self):
        g = Grid(32, 32)
        cut = GalerkinCutoff(g, np.sqrt(2.0))
        f = random_scalar(g, np.random.default_rng(20), mean_zero=False)
        low = galerkin_project(f, cut, "low")
        high = galerkin_project(f, cut, "high")
        assert np.array_equal(low.coeffs + high.coeffs, f.coeffs)

    def test_lambda_n_values(self):
        g = Grid(32, 32)
        # |k|^2 on the integer lattice: 1, 2, 4, 5, 8, ...
        assert GalerkinCutoff(g, 1.0).lambda_n == 2.0
        assert GalerkinCutoff(g, np.sqrt(2.0)).lambda_n == 4.0
        assert GalerkinCutoff(g, 2.5).lambda_n == 8.0

    def test_poincare_split(self):
        g = Grid(32, 32)
        cut = GalerkinCutoff(g, 2.5)
        rng = np.random.default_rng(21)
        for _ in range(10):
            f = random_scalar(g, rng, dealiased=False)
            low = galerkin_project(f, cut, "low")
            high = galerkin_project(f, cut, "high")
            # ||P_N f||_{H1}^2 <= max retained |k|^2 * |P_N f|^2 (here 5 < lambda_n)
            assert sobolev_norm(low, 1.0) ** 2 <= cut.lambda_n * sobolev_norm(low) ** 2 + 1e-12
            # |Q_N f|^2 <= lambda_n^{-1} ||Q_N f||_{H1}^2, lambda_n the first excluded
            assert sobolev_norm(high) ** 2 <= sobolev_norm(high, 1.0) ** 2 / cut.lambda_n + 1e-12

    def test_mode_count(self):
        g = Grid(32, 32)
        assert GalerkinCutoff(g, 1.0).mode_count() == 4
        assert GalerkinCutoff(g, np.sqrt(2.0)).mode_count() == 8
