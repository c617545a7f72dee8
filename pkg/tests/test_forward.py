import numpy as np
import pytest

from phasetomo import forward as F
from phasetomo import geodesics as G
from phasetomo import medium as M


@pytest.fixture(scope="module")
def gaussian():
    return M.AnalyticPhantom(epsilon=0.1, sigma=0.5, support_radius=1.0)


class TestIncidentAmplitude:
    def test_inverse_distance_scaling(self):
        assert F.incident_amplitude(2.0) == pytest.approx(1.0 / (8 * np.pi))
        assert F.incident_amplitude(1.0) / F.incident_amplitude(3.0) == \
            pytest.approx(3.0)

    def test_rejects_coincident_pair(self):
        with pytest.raises(ValueError):
            F.incident_amplitude(0.0)


class TestLeadingAmplitude:
    def test_vacuum_reduces_to_incident(self):
        path = G.connect(M.vacuum(), x=(1.2, 1.2, 0.8), y=(-0.3, 0.1, 0.2))
        amp = F.leading_amplitude(M.vacuum(), path)
        assert amp.value == pytest.approx(
            F.incident_amplitude(path.euclidean_length), rel=1e-8)

    def test_vacuum_two_units_apart(self):
        path = G.connect(M.vacuum(), x=(1, 0, 0), y=(-1, 0, 0))
        amp = F.leading_amplitude(M.vacuum(), path)
        assert amp.value == pytest.approx(1.0 / (8 * np.pi), rel=1e-8)

    def test_prescribed_pass_through(self, gaussian):
        path = G.connect(gaussian, x=(2, 0, 0), y=(-2, 0, 0), force=True)
        a0 = F.incident_amplitude(4.0)
        amp = F.leading_amplitude(gaussian, path, model="prescribed",
                                  prescribed=2.0 * a0)
        assert amp.value == 2.0 * a0

    def test_focusing_bump_raises_amplitude(self, gaussian):
        path = G.connect(gaussian, x=(2, 0, 0), y=(-2, 0, 0), force=True)
        amp = F.leading_amplitude(gaussian, path)
        assert amp.value > F.incident_amplitude(4.0)

    def test_stable_under_paraxial_step_halving(self, gaussian):
        path = G.connect(gaussian, x=(2, 0, 0), y=(-2, 0, 0), force=True)
        a1 = F.leading_amplitude(gaussian, path, paraxial_delta=1e-5).value
        a2 = F.leading_amplitude(gaussian, path, paraxial_delta=5e-6).value
        assert abs(a1 - a2) / a1 <= 0.01

    def test_positive_contract(self):
        with pytest.raises(Exception):
            F.LeadingAmplitude(-0.1, "prescribed")


class TestKGrid:
    def test_uniform_and_increasing(self):
        k = F.KGrid(50.0, 500.0, 0.25).values
        assert k[0] == 50.0
        dk = np.diff(k)
        assert np.all(dk > 0)
        assert np.ptp(dk) <= 1e-9 * dk[0]

    def test_twenty_samples_per_period(self):
        kg = F.KGrid.for_alpha(2.0)
        period = 2 * np.pi / 2.0
        assert period / kg.dk >= 20.0

    def test_rejects_nonpositive_kmin(self):
        with pytest.raises(ValueError):
            F.KGrid(0.0, 10.0, 0.1)


class TestRemainderModel:
    def test_none_is_zero(self):
        k = F.KGrid(50, 500, 0.5).values
        u, c = F.RemainderModel("none").sample(k, tau=2.0)
        assert np.all(u == 0) and c == 0.0

    def test_decay_bounds_hold(self):
        k = F.KGrid(50, 500, 0.2).values
        for kind in ("rational-decay", "random-smooth"):
            rem = F.RemainderModel(kind, c=0.3, seed=4, normalize=True)
            u, c_rep = rem.sample(k, tau=2.5, pair_seed=9)
            assert np.all(k * np.abs(u) <= c_rep * (1 + 1e-9))
            kmid = 0.5 * (k[:-1] + k[1:])
            deriv = np.abs(np.diff(u)) / np.diff(k)
            assert np.all(kmid * deriv <= c_rep * (1 + 1e-9))

    def test_normalized_constant_equals_target(self):
        k = F.KGrid(50, 500, 0.2).values
        rem = F.RemainderModel("random-smooth", c=0.17, seed=1, normalize=True)
        _, c_rep = rem.sample(k, tau=3.0, pair_seed=2)
        assert c_rep == pytest.approx(0.17, rel=1e-9)

    def test_same_seed_bit_identical(self):
        k = F.KGrid(50, 500, 0.3).values
        rem = F.RemainderModel("random-smooth", c=0.2, seed=11)
        u1, _ = rem.sample(k, tau=2.0, pair_seed=5)
        u2, _ = rem.sample(k, tau=2.0, pair_seed=5)
        assert np.array_equal(u1, u2)

    def test_distinct_pair_seeds_differ(self):
        k = F.KGrid(50, 500, 0.3).values
        rem = F.RemainderModel("random-smooth", c=0.2, seed=11)
        u1, _ = rem.sample(k, tau=2.0, pair_seed=5)
        u2, _ = rem.sample(k, tau=2.0, pair_seed=6)
        assert not np.array_equal(u1, u2)


class TestSynthesizeSpectrum:
    def test_pointwise_beat_identity(self):
        # f = A^2 + A0^2 - 2 A A0 cos(k alpha) with no remainder
        kg = F.KGrid(0.5, 2.0, 0.5)
        spec = F.synthesize_spectrum(2.0, 1.0, tau=1.0 + np.pi, dist=1.0,
                                     rem=F.RemainderModel("none"), kgrid=kg)
        idx = int(np.argmin(np.abs(spec.k - 1.0)))
        assert spec.f[idx] == pytest.approx(9.0, abs=1e-12)

    def test_cancellation_at_zero_alpha(self):
        kg = F.KGrid(50, 500, 0.5)
        spec = F.synthesize_spectrum(1.0, 1.0, tau=2.0, dist=2.0,
                                     rem=F.RemainderModel("none"), kgrid=kg)
        assert np.all(spec.f == 0.0)

    def test_cross_term_bound(self):
        # |f - beat formula| <= 2 (A+A0) C/k + C^2/k^2 for |u_hat| <= C/k
        kg = F.KGrid(50, 500, 0.2)
        A, A0, alpha, d = 2.0, 1.0, 0.8, 2.0
        rem = F.RemainderModel("rational-decay", c=0.1)
        spec = F.synthesize_spectrum(A, A0, tau=d + alpha, dist=d, rem=rem,
                                     kgrid=kg)
        k = spec.k
        beat = A ** 2 + A0 ** 2 - 2 * A * A0 * np.cos(k * alpha)
        bound = 2 * (A + A0) * 0.1 / k + 0.01 / k ** 2
        assert np.all(np.abs(spec.f - beat) <= bound * (1 + 1e-9))

    def test_nonnegative_with_any_remainder(self):
        kg = F.KGrid(50, 500, 0.2)
        rem = F.RemainderModel("random-smooth", c=0.3, seed=3, normalize=True)
        spec = F.synthesize_spectrum(0.05, 0.04, tau=2.3, dist=2.0, rem=rem,
                                     kgrid=kg, pair_seed=12)
        assert np.all(spec.f >= 0.0)

    def test_tail_envelope_brackets_extremes(self):
        # sup/inf over any window spanning a beat period approach (A +- A0)^2
        A, A0, alpha = 2.0, 1.0, 1.0
        kg = F.KGrid.for_alpha(alpha)
        spec = F.synthesize_spectrum(A, A0, tau=2.0 + alpha, dist=2.0,
                                     rem=F.RemainderModel("none"), kgrid=kg)
        width = 2 * np.pi / alpha
        lo = spec.k >= spec.k[-1] - 1.2 * width
        slack = (A * A0) * (alpha * kg.dk) ** 2 / 4
        assert spec.f[lo].max() == pytest.approx((A + A0) ** 2, abs=3 * slack)
        assert spec.f[lo].min() == pytest.approx((A - A0) ** 2, abs=3 * slack)

    def test_tau_below_distance_rejected(self):
        with pytest.raises(ValueError):
            F.synthesize_spectrum(1.0, 1.0, tau=1.0, dist=2.0,
                                  rem=F.RemainderModel("none"),
                                  kgrid=F.KGrid(50, 60, 0.5))


class TestSynthesizeDataset:
    def test_vacuum_dataset_all_zero(self):
        surf = M.sphere_surface(2.0, 4, 4)
        ds = F.synthesize_dataset(M.vacuum(), surf, F.RemainderModel("none"),
                                  F.KGrid(50, 100, 0.5), seed=1)
        assert len(ds.spectra) == 16
        for spec in ds.spectra:
            assert np.all(spec.f <= 1e-20)
            assert spec.provenance["alpha"] <= 1e-10

    def test_shared_points_pair_count_and_alpha_sign(self, gaussian):
        # 4 points used as both sources and receivers: 12 ordered pairs, and
        # every chord crosses the support at surface radius 1.5
        pts = M.fibonacci_sphere(4, 1.5)
        surf = M.SurfaceConfig(kind="sphere", center=(0, 0, 0), radius=1.5,
                               sources=pts, receivers=pts)
        ds = F.synthesize_dataset(gaussian, surf, F.RemainderModel("none"),
                                  F.KGrid(50, 100, 0.5), seed=2)
        assert len(ds.spectra) == 12
        assert all(s.provenance["alpha"] > 0 for s in ds.spectra)

    def test_reproducible_at_fixed_seed(self, gaussian):
        surf = M.sphere_surface(2.0, 3, 3)
        kg = F.KGrid(50, 120, 0.4)
        rem = F.RemainderModel("random-smooth", c=0.2, seed=7)
        a = F.synthesize_dataset(gaussian, surf, rem, kg, seed=42)
        b = F.synthesize_dataset(gaussian, surf, rem, kg, seed=42)
        for sa, sb in zip(a.spectra, b.spectra):
            assert np.array_equal(sa.f, sb.f)

    def test_file_round_trip(self, tmp_path, gaussian):
        surf = M.sphere_surface(2.0, 3, 3)
        ds = F.synthesize_dataset(gaussian, surf,
                                  F.RemainderModel("rational-decay", c=0.05),
                                  F.KGrid(50, 120, 0.4), seed=9)
        F.write_dataset(ds, tmp_path)
        back = F.read_dataset(tmp_path)
        assert len(back.spectra) == len(ds.spectra)
        for sa, sb in zip(ds.spectra, back.spectra):
            assert np.array_equal(sa.f, sb.f)
            assert sa.provenance["alpha"] == sb.provenance["alpha"]
