import numpy as np
import pytest

from phasetomo import medium as M
from phasetomo.errors import OutOfDomainError


@pytest.fixture(scope="module")
def gaussian():
    return M.AnalyticPhantom(epsilon=0.1, sigma=0.5, support_radius=1.0)


@pytest.fixture(scope="module")
def gaussian_grid(gaussian):
    return M.sample_to_grid(gaussian, origin=(-1.3, -1.3, -1.3),
                            spacing=0.02, dims=(131, 131, 131))


def fd_gradient_log(field, point, h=1e-5):
    """Independent central-difference oracle for grad(ln n)."""
    point = np.asarray(point, dtype=float)
    grad = np.zeros(3)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        grad[ax] = (np.log(M.evaluate(field, point + e))
                    - np.log(M.evaluate(field, point - e))) / (2 * h)
    return grad


def fd_hessian_log(field, point, h=1e-4):
    """Independent finite-difference oracle for Hess(ln n)."""
    point = np.asarray(point, dtype=float)
    logn = lambda p: np.log(M.evaluate(field, p))
    hess = np.zeros((3, 3))
    for i in range(3):
        ei = np.zeros(3)
        ei[i] = h
        hess[i, i] = (logn(point + ei) - 2 * logn(point)
                      + logn(point - ei)) / h ** 2
        for j in range(i + 1, 3):
            ej = np.zeros(3)
            ej[j] = h
            mixed = (logn(point + ei + ej) - logn(point + ei - ej)
                     - logn(point - ei + ej) + logn(point - ei - ej)) / (4 * h * h)
            hess[i, j] = hess[j, i] = mixed
    return hess


class TestEvaluate:
    def test_vacuum_everywhere_one(self):
        assert M.evaluate(M.vacuum(), (0.3, -0.2, 5.0)) == 1.0

    def test_gaussian_peak(self, gaussian):
        # n = 1 + 0.1 exp(-|x|^2 / 0.25) at the origin
        assert M.evaluate(gaussian, (0.0, 0.0, 0.0)) == pytest.approx(1.1, abs=1e-15)

    def test_grid_matches_analytic_off_grid(self, gaussian, gaussian_grid):
        point = (0.05, 0.05, 0.0)
        assert M.evaluate(gaussian_grid, point) == pytest.approx(
            M.evaluate(gaussian, point), abs=1e-6)

    def test_vacuum_exactness_outside_support(self, gaussian, gaussian_grid):
        rng = np.random.default_rng(7)
        direction = rng.normal(size=(1000, 3))
        direction /= np.linalg.norm(direction, axis=1)[:, None]
        radius = rng.uniform(1.0, 2.4, size=1000)
        pts = direction * radius[:, None]
        pts = pts[np.linalg.norm(pts, axis=1) > 1.0]
        # analytic phantoms are exactly 1 anywhere beyond the support ball
        assert np.all(np.abs(gaussian.values(pts) - 1.0) <= 1e-12)
        # sampled fields promise 1e-12 outside the support box, where the
        # interpolation stencil sees vacuum samples only
        box = 1.0 + 2 * gaussian_grid.spacing.max()
        outside_box = pts[np.abs(pts).max(axis=1) > box]
        assert len(outside_box) > 100
        assert np.all(np.abs(gaussian_grid.values(outside_box) - 1.0) <= 1e-12)

    def test_lower_bound(self, gaussian_grid):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-1.2, 1.2, size=(2000, 3))
        assert gaussian_grid.values(pts).min() >= 1.0 - 1e-12

    def test_deterministic(self, gaussian_grid):
        p = (0.123, -0.456, 0.789)
        assert M.evaluate(gaussian_grid, p) == M.evaluate(gaussian_grid, p)

    def test_out_of_grid_without_extension_raises(self, gaussian):
        grid = M.sample_to_grid(gaussian, origin=(-1.3, -1.3, -1.3),
                                spacing=0.05, dims=(53, 53, 53),
                                vacuum_extension=False)
        with pytest.raises(OutOfDomainError):
            M.evaluate(grid, (3.0, 0.0, 0.0))

    def test_nonfinite_point_rejected(self, gaussian):
        with pytest.raises(ValueError):
            M.evaluate(gaussian, (np.nan, 0.0, 0.0))

    def test_interpolation_order_floor(self, gaussian):
        with pytest.raises(ValueError):
            M.sample_to_grid(gaussian, origin=(-1.3, -1.3, -1.3),
                             spacing=0.05, dims=(53, 53, 53), order=1)


class TestGradientLogN:
    def test_vacuum_zero(self):
        assert np.allclose(M.gradient_log_n(M.vacuum(), (1.0, 2.0, 3.0)), 0.0)

    def test_zero_at_radial_peak(self, gaussian):
        assert np.allclose(M.gradient_log_n(gaussian, (0.0, 0.0, 0.0)), 0.0)

    def test_matches_fd_oracle(self, gaussian):
        point = (0.25, 0.0, 0.0)
        got = M.gradient_log_n(gaussian, point)
        assert np.allclose(got, fd_gradient_log(gaussian, point), atol=1e-6)

    def test_zero_outside_support(self, gaussian):
        assert np.allclose(M.gradient_log_n(gaussian, (1.7, 0.4, 0.0)), 0.0)

    def test_fd_consistency_random_points(self, gaussian):
        # grad(ln n) must agree with central differences of ln(evaluate)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.8, 0.8, size=(25, 3))
        for p in pts:
            got = M.gradient_log_n(gaussian, p)
            ora = fd_gradient_log(gaussian, p, h=1e-5)
            assert np.allclose(got, ora, atol=5e-9, rtol=1e-6)

    def test_grid_field_fd_consistency(self, gaussian_grid):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-0.7, 0.7, size=(10, 3))
        grads = gaussian_grid.grad_log(pts)
        for p, got in zip(pts, grads):
            ora = fd_gradient_log(gaussian_grid, p, h=5e-3)
            assert np.allclose(got, ora, atol=2e-4)


class TestCheckRegularity:
    def test_vacuum_passes(self):
        rep = M.check_regularity(M.vacuum(), 0.25)
        assert rep.verdict == "pass"
        assert rep.n00 == pytest.approx(1.01)

    def test_log_quadratic_core_passes(self):
        # ln n = |x|^2 inside the core, Hessian exactly 2 I there
        field = M.AnalyticPhantom(profile="log-quadratic", epsilon=1.0,
                                  support_radius=1.0)
        rep = M.check_regularity(field, 0.1, region_radius=0.45)
        assert rep.verdict == "pass"
        core = field.hess_log(np.array([[0.1, 0.05, -0.2]]))[0]
        assert np.allclose(core, 2.0 * np.eye(3), atol=1e-12)

    def test_strong_gaussian_fails_with_fd_oracle_value(self):
        field = M.AnalyticPhantom(epsilon=0.5, sigma=0.5, support_radius=1.0)
        rep = M.check_regularity(field, 0.1)
        assert rep.verdict == "fail"
        oracle = np.linalg.eigvalsh(fd_hessian_log(field, rep.worst_point))[0]
        assert rep.worst_eigenvalue == pytest.approx(oracle, abs=1e-4)

    def test_n00_dominates_field(self, gaussian):
        rep = M.check_regularity(gaussian, 0.2)
        assert rep.n00 > gaussian.sup_n()
        assert rep.n00 > 1.0

    def test_monotone_under_coarsening(self):
        # pass at spacing h implies pass at 2h: the coarse grid is a subset
        field = M.AnalyticPhantom(profile="log-quadratic", epsilon=0.8,
                                  support_radius=1.0)
        fine = M.check_regularity(field, 0.1, region_radius=0.45)
        coarse = M.check_regularity(field, 0.2, region_radius=0.45)
        assert fine.verdict == "pass"
        assert coarse.verdict == "pass"
        assert coarse.points_checked < fine.points_checked


class TestSurfaceConfig:
    def test_points_on_sphere(self):
        surf = M.sphere_surface(2.0, 16, 16)
        for pts in (surf.sources, surf.receivers):
            assert np.abs(np.linalg.norm(pts, axis=1) - 2.0).max() <= 1e-10

    def test_off_surface_point_rejected(self):
        with pytest.raises(ValueError):
            M.SurfaceConfig(kind="sphere", center=(0, 0, 0), radius=2.0,
                            sources=[(1.0, 0.0, 0.0)],
                            receivers=[(2.0, 0.0, 0.0)])

    def test_surface_inside_support_rejected(self, gaussian):
        surf = M.sphere_surface(0.5, 4, 4)
        with pytest.raises(ValueError):
            surf.validate_against(gaussian)

    def test_ordered_pairs_exclude_coincident(self):
        pts = M.fibonacci_sphere(4, 2.0)
        surf = M.SurfaceConfig(kind="sphere", center=(0, 0, 0), radius=2.0,
                               sources=pts, receivers=pts)
        pairs = surf.ordered_pairs()
        assert len(pairs) == 12            # 4*4 minus the 4 coincident pairs
        assert all(j != i for j, i in pairs)


class TestFieldFiles:
    def test_analytic_round_trip(self, tmp_path, gaussian):
        path = tmp_path / "phantom.json"
        M.save_field(gaussian, path)
        back = M.load_field(path)
        pts = np.random.default_rng(0).uniform(-1, 1, size=(50, 3))
        assert np.array_equal(back.values(pts), gaussian.values(pts))

    def test_grid_round_trip_bit_identical(self, tmp_path, gaussian):
        grid = M.sample_to_grid(gaussian, origin=(-1.3, -1.3, -1.3),
                                spacing=0.1, dims=(27, 27, 27))
        path = tmp_path / "grid.json"
        M.save_field(grid, path)
        back = M.load_field(path)
        assert np.array_equal(back.grid_values, grid.grid_values)
        assert (tmp_path / "grid.bin").exists()
