import numpy as np
import pytest

from phasetomo import geodesics as G
from phasetomo import medium as M
from phasetomo.errors import ConnectionFailure


@pytest.fixture(scope="module")
def gaussian():
    return M.AnalyticPhantom(epsilon=0.1, sigma=0.5, support_radius=1.0)


class TestTraceRay:
    def test_vacuum_straight_segment(self):
        path = G.trace_ray(M.vacuum(), (0, 0, 0), (1, 0, 0), max_tau=2.0)
        assert np.allclose(path.nodes[-1], (2.0, 0.0, 0.0), atol=1e-12)
        assert path.tau == pytest.approx(2.0, abs=1e-12)

    def test_bouguer_invariant_radial_medium(self, gaussian):
        # |x cross p| is conserved along rays of any radial field
        path = G.trace_ray(gaussian, (-2.0, 0.3, 0.0), (1, 0, 0), max_tau=4.5)
        lm = np.linalg.norm(np.cross(path.nodes, path.slowness), axis=1)
        assert (lm.max() - lm.min()) / lm.mean() <= 1e-6

    def test_hamiltonian_constraint(self, gaussian):
        path = G.trace_ray(gaussian, (-2.0, 0.2, 0.1), (1, 0, 0), max_tau=4.0)
        n = gaussian.values(path.nodes)
        p = np.linalg.norm(path.slowness, axis=1)
        assert np.abs(p / n - 1.0).max() <= 1e-8

    def test_requires_unit_direction(self):
        with pytest.raises(ValueError):
            G.trace_ray(M.vacuum(), (0, 0, 0), (1.0, 0.5, 0.0), max_tau=1.0)

    def test_requires_positive_budget(self):
        with pytest.raises(ValueError):
            G.trace_ray(M.vacuum(), (0, 0, 0), (1, 0, 0), max_tau=0.0)


class TestConnect:
    def test_vacuum_straight(self):
        path = G.connect(M.vacuum(), x=(1, 0, 0), y=(0, 0, 0))
        assert path.tau == pytest.approx(1.0, abs=1e-10)
        assert path.endpoint_residual <= 1e-8
        assert path.iterations == 0     # straight seed is already exact

    def test_tau_exceeds_chord_through_bump(self, gaussian):
        path = G.connect(gaussian, x=(2, 0, 0), y=(-2, 0, 0), force=True)
        assert path.tau > 4.0
        assert path.tau - 4.0 == pytest.approx(0.085, abs=0.01)

    def test_endpoint_swap_symmetry(self, gaussian):
        a = G.connect(gaussian, x=(2, 0, 0), y=(-1.2, 1.6, 0), force=True)
        b = G.connect(gaussian, x=(-1.2, 1.6, 0), y=(2, 0, 0), force=True)
        assert abs(a.tau - b.tau) <= 1e-8 * a.tau

    def test_rejects_coincident_endpoints(self, gaussian):
        with pytest.raises(ValueError):
            G.connect(gaussian, x=(1, 0, 0), y=(1, 0, 0), force=True)

    def test_failing_regularity_needs_force(self, gaussian):
        with pytest.raises(ConnectionFailure):
            G.connect(gaussian, x=(2, 0, 0), y=(-2, 0, 0), force=False)

    def test_node_order_runs_from_y_to_x(self, gaussian):
        x, y = np.array([2.0, 0, 0]), np.array([-1.2, 1.6, 0])
        path = G.connect(gaussian, x=x, y=y, force=True)
        assert np.linalg.norm(path.nodes[0] - y) <= 1e-12
        assert np.linalg.norm(path.nodes[-1] - x) <= 1e-7

    def test_integrator_order_at_least_four(self, gaussian):
        # Richardson ratio on a fixed initial-value ray through the bump:
        # tau(h) - tau(h/2) must shrink by ~2^4 per halving
        origin = np.array([[-2.0, 0.25, 0.1]])
        direction = np.array([[1.0, 0.0, 0.0]])
        taus = []
        for step in (0.08, 0.04, 0.02, 0.01):
            _, _, tau = G.integrate_rays(gaussian, origin, direction,
                                         np.array([4.0]), step=step)
            taus.append(tau[0])
        diffs = np.abs(np.diff(taus))
        orders = np.log2(diffs[:-1] / diffs[1:])
        assert orders.min() >= 3.8


class TestOracle:
    def test_vacuum_axis_aligned(self):
        tau = G.travel_time_oracle(M.vacuum(), x=(0.5, 0, 0), y=(-0.5, 0, 0),
                                   grid_spacing=0.05,
                                   box=((-0.6, -0.3, -0.3), (0.6, 0.3, 0.3)))
        assert tau == pytest.approx(1.0, rel=5e-3)

    def test_matches_connect_on_phantom(self, gaussian):
        tau_ray = G.connect(gaussian, x=(2, 0, 0), y=(-2, 0, 0), force=True).tau
        tau_graph = G.travel_time_oracle(
            gaussian, x=(2, 0, 0), y=(-2, 0, 0), grid_spacing=0.02,
            box=((-2.1, -0.55, -0.55), (2.1, 0.55, 0.55)))
        assert abs(tau_graph - tau_ray) / tau_ray <= 0.01

    def test_refinement_monotone(self, gaussian):
        box = ((-1.3, -0.4, -0.4), (1.3, 0.4, 0.4))
        coarse = G.travel_time_oracle(gaussian, x=(1.2, 0, 0), y=(-1.2, 0, 0),
                                      grid_spacing=0.08, box=box)
        fine = G.travel_time_oracle(gaussian, x=(1.2, 0, 0), y=(-1.2, 0, 0),
                                    grid_spacing=0.04, box=box)
        assert fine <= coarse + 1e-9

    def test_endpoint_must_sit_on_lattice(self, gaussian):
        with pytest.raises(ValueError):
            G.travel_time_oracle(gaussian, x=(1.03, 0, 0), y=(-1.0, 0, 0),
                                 grid_spacing=0.05,
                                 box=((-1.2, -0.3, -0.3), (1.2, 0.3, 0.3)))


class TestBuildTable:
    def test_vacuum_taus_equal_chords(self):
        surf = M.sphere_surface(2.0, 4, 4)
        table = G.build_table(M.vacuum(), surf)
        assert not table.failed.any()
        assert np.abs(table.tau - table.distances).max() <= 1e-10

    def test_symmetric_closure(self, gaussian):
        pts = M.fibonacci_sphere(4, 2.0)
        surf = M.SurfaceConfig(kind="sphere", center=(0, 0, 0), radius=2.0,
                               sources=pts, receivers=pts)
        table = G.build_table(gaussian, surf)
        taus = {}
        for idx in range(len(table)):
            taus[(int(table.rcv_idx[idx]), int(table.src_idx[idx]))] = table.tau[idx]
        for (j, i), tau in taus.items():
            assert abs(tau - taus[(i, j)]) <= 1e-8 * tau

    def test_lower_bound_and_triangle_inequality(self, gaussian):
        pts = M.fibonacci_sphere(5, 2.0)
        surf = M.SurfaceConfig(kind="sphere", center=(0, 0, 0), radius=2.0,
                               sources=pts, receivers=pts)
        table = G.build_table(gaussian, surf)
        assert np.all(table.tau >= table.distances - 1e-10)
        tau = {}
        for idx in range(len(table)):
            tau[(int(table.rcv_idx[idx]), int(table.src_idx[idx]))] = table.tau[idx]
        n = len(pts)
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    if len({a, b, c}) < 3:
                        continue
                    assert tau[(a, c)] <= tau[(a, b)] + tau[(b, c)] + 1e-6

    def test_csv_round_trip(self, tmp_path, gaussian):
        surf = M.sphere_surface(1.8, 3, 3)
        table = G.build_table(gaussian, surf)
        path = tmp_path / "table.csv"
        table.to_csv(path)
        back = G.TravelTimeTable.from_csv(path)
        assert np.array_equal(back.tau, table.tau)
        assert np.array_equal(back.src, table.src)
        assert np.array_equal(back.failed, table.failed)

    def test_phantom_entries_match_oracle(self, gaussian):
        # axis-aligned antipodal pair; oracle is an independent discretization
        src = np.array([[-2.0, 0, 0]])
        rcv = np.array([[2.0, 0, 0]])
        surf = M.SurfaceConfig(kind="sphere", center=(0, 0, 0), radius=2.0,
                               sources=src, receivers=rcv)
        table = G.build_table(gaussian, surf)
        tau_graph = G.travel_time_oracle(
            gaussian, x=rcv[0], y=src[0], grid_spacing=0.02,
            box=((-2.1, -0.55, -0.55), (2.1, 0.55, 0.55)))
        assert abs(table.tau[0] - tau_graph) / tau_graph <= 0.01
