import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualscale.diagnostics import (
    CSV_HEADER, MetricsReport, SsimParams, center_of_vorticity, divergence_error, energy_spectrum,
    enstrophy, gradient_vector_error, kinetic_energy, max_local_gradient, mse, ssim,
    stepwise_errors,
)
from dualscale.errors import ParameterError, ShapeError
from dualscale.initial_conditions import (
    McWilliamsParams, VortexSpec, gaussian_vortex_field, sample_mcwilliams,
)
from dualscale.spectral import Field2D

TWO_PI = 2 * math.pi


def rand_field(seed, n=32, L=TWO_PI):
    return Field2D(np.random.default_rng(seed).standard_normal((n, n)), L)


def xgrid(n=64, L=TWO_PI):
    x = np.arange(n) * L / n
    return np.meshgrid(x, x)


class TestMse:
    def test_identical(self):
        f = rand_field(0)
        assert mse(f, f) == 0

    def test_constant_offset(self):
        f = rand_field(1)
        assert mse(f.like(f.values + 0.3), f) == pytest.approx(0.09, rel=1e-12)

    def test_hand_value(self):
        assert mse(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 4.0])) == pytest.approx(1 / 3)

    def test_trajectories(self):
        a = [rand_field(i) for i in range(3)]
        b = [rand_field(i + 10) for i in range(3)]
        expected = np.mean([mse(x, y) for x, y in zip(a, b)])
        assert mse(a, b) == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(rand_field(0, 16), rand_field(0, 32))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 10**6))
    def test_symmetric_nonnegative(self, s1, s2):
        a, b = rand_field(s1, 8), rand_field(s2, 8)
        assert mse(a, b) == mse(b, a) >= 0


class TestSsim:
    params = SsimParams(data_range=4.0)

    def test_identity(self):
        f = rand_field(3)
        assert abs(ssim(f, f, self.params) - 1) < 1e-9
        assert abs(ssim(f, f) - 1) < 1e-9

    def test_symmetric(self):
        a, b = rand_field(4), rand_field(5)
        assert abs(ssim(a, b, self.params) - ssim(b, a, self.params)) < 1e-12

    def test_constant_fields_closed_form(self):
        a, b = 0.7, -0.2
        c1 = (0.01 * 4.0) ** 2
        got = ssim(Field2D(np.full((16, 16), a)), Field2D(np.full((16, 16), b)), self.params)
        assert got == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), abs=1e-10)

    def test_window_validation(self):
        with pytest.raises(ParameterError):
            SsimParams(window=4)
        with pytest.raises(ParameterError):
            SsimParams(data_range=0.0)

    def test_kernel_normalized(self):
        g = SsimParams().kernel()
        assert len(g) == 11 and g.sum() == pytest.approx(1.0) and np.argmax(g) == 5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssim(rand_field(0, 16), rand_field(0, 32))

    def test_distinct_below_one(self):
        a = rand_field(6)
        assert ssim(a.like(a.values + 0.1 * rand_field(7).values), a, self.params) < 1 - 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 10))
    def test_bounded(self, seed, scale):
        a, b = rand_field(seed, 16), rand_field(seed + 1, 16)
        v = ssim(a.like(scale * a.values), b)
        assert -1 <= v <= 1


class TestGradientError:
    def test_identical(self):
        f = rand_field(0)
        assert gradient_vector_error(f, f) == 0

    def test_constant_offset(self):
        f = rand_field(0)
        assert gradient_vector_error(f.like(f.values + 5.0), f) < 1e-24

    def test_single_mode(self):
        L, n, eps = 2.0, 64, 0.01
        X, _ = xgrid(n, L)
        f = rand_field(2, n, L)
        g = f.like(f.values + eps * np.sin(TWO_PI * X / L))
        k, h = TWO_PI / L, L / n
        cd_factor = (math.sin(k * h) / (k * h)) ** 2
        expected = eps ** 2 * k ** 2 * cd_factor * 0.5
        assert gradient_vector_error(g, f) == pytest.approx(expected, rel=1e-10)


class TestDivergenceError:
    def test_zero(self):
        assert divergence_error(Field2D(np.zeros((16, 16)))) == 0

    def test_single_mode_truncation_formula(self):
        # for w = cos(a x + b y): psi = w / k^2 and the central divergence is
        # psi * (b sin(a h) - a sin(b h)) / h, whose mean square is half its peak squared
        a, b, n = 2, 1, 64
        X, Y = xgrid(n)
        h = TWO_PI / n
        peak = (b * math.sin(a * h) - a * math.sin(b * h)) / h / (a * a + b * b)
        got = divergence_error(Field2D(np.cos(a * X + b * Y)))
        assert got == pytest.approx(0.5 * peak ** 2, rel=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_band_limited_small(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = xgrid()
        f = np.zeros_like(X)
        for a in range(-2, 3):
            for b in range(-2, 3):
                f += rng.standard_normal() * np.cos(a * X + b * Y + rng.uniform(0, TWO_PI))
        f -= f.mean()
        assert divergence_error(Field2D(f / np.abs(f).max())) < 1e-6

    def test_mean_invariant(self):
        w = sample_mcwilliams((64, 64, TWO_PI), McWilliamsParams(seed=0))
        a = divergence_error(w)
        b = divergence_error(w.like(w.values + 3.0))
        assert b == pytest.approx(a, rel=1e-9)

    def test_nonnegative(self):
        assert divergence_error(rand_field(9)) >= 0


class TestCenterOfVorticity:
    def test_single_vortex(self):
        h = TWO_PI / 128
        w = gaussian_vortex_field((128, 128, TWO_PI), VortexSpec((64 * h, 64 * h), 1.0, 0.3))
        x, y = center_of_vorticity(w)
        assert abs(x - math.pi) < h and abs(y - math.pi) < h

    def test_two_vortices_midpoint(self):
        g = (128, 128, TWO_PI)
        a, b = (2.0, 3.0), (4.0, 3.5)
        w = (gaussian_vortex_field(g, VortexSpec(a, 1.0, 0.3)).values
             + gaussian_vortex_field(g, VortexSpec(b, -1.0, 0.3)).values)
        x, y = center_of_vorticity(Field2D(w))
        assert abs(x - 3.0) < TWO_PI / 128 and abs(y - 3.25) < TWO_PI / 128

    def test_uniform(self):
        L, n = 2.0, 16
        x, y = center_of_vorticity(Field2D(np.ones((n, n)), L))
        assert x == pytest.approx(L / 2 - L / n / 2) and y == pytest.approx(L / 2 - L / n / 2)

    def test_zero_field(self):
        with pytest.raises(ParameterError):
            center_of_vorticity(Field2D(np.zeros((8, 8))))

    @pytest.mark.parametrize("shift", [(3, 0), (0, 5), (-4, 7)])
    def test_translation_equivariance(self, shift):
        g = (128, 128, TWO_PI)
        w = gaussian_vortex_field(g, VortexSpec((3.0, 3.2), 1.0, 0.3)).values
        x0, y0 = center_of_vorticity(Field2D(w))
        x1, y1 = center_of_vorticity(Field2D(np.roll(w, (shift[1], shift[0]), axis=(0, 1))))
        h = TWO_PI / 128
        assert abs(x1 - x0 - shift[0] * h) < h and abs(y1 - y0 - shift[1] * h) < h


class TestMaxLocalGradient:
    def test_constant(self):
        assert max_local_gradient(Field2D(np.full((32, 32), 2.0)), (1.0, 1.0), 1.0) == 0

    def test_sine_full_period(self):
        L = 1.0
        X, _ = xgrid(64, L)
        w = Field2D(np.sin(TWO_PI * X / L), L)
        assert max_local_gradient(w, (0.5, 0.5), 0.6) == pytest.approx(TWO_PI / L, abs=1e-8)

    def test_excluding_steep_zone_is_smaller(self):
        g = (128, 128, TWO_PI)
        w = gaussian_vortex_field(g, VortexSpec((3.0, 3.0), 1.0, 0.4))
        whole = max_local_gradient(w, (3.0, 3.0), 3.0)
        # a small disc at the core sits inside the steepest ring (r = radius)
        core = max_local_gradient(w, (3.0, 3.0), 0.15)
        assert core < whole

    def test_radius_too_small(self):
        with pytest.raises(ParameterError):
            max_local_gradient(Field2D(np.zeros((16, 16))), (1.0, 1.0), 0.1)


class TestEnergySpectrum:
    def test_single_mode_shell(self):
        X, _ = xgrid(32)
        spec = dict(energy_spectrum(Field2D(np.sin(4 * X))))
        total = sum(spec.values())
        assert spec[4] == pytest.approx(total, rel=1e-12)
        assert spec[4] == pytest.approx(1 / 16 * 0.5 * 0.5, rel=1e-12)  # |v| = cos/4

    @pytest.mark.parametrize("seed", range(5))
    def test_parseval_closure(self, seed):
        w = rand_field(seed, 32)
        E = energy_spectrum(w)
        assert all(e >= 0 for _, e in E)
        ke = kinetic_energy(w)
        assert abs(sum(e for _, e in E) - ke) / ke < 1e-10

    def test_brute_force_binning(self):
        w = sample_mcwilliams((32, 32, TWO_PI), McWilliamsParams(seed=4))
        c = np.fft.fft2(w.values)
        n = 32
        expected = {}
        for i in range(n):
            for j in range(n):
                ky = i if i < n // 2 else i - n
                kx = j if j < n // 2 else j - n
                k2 = kx * kx + ky * ky
                if k2 == 0:
                    continue
                dkx = 0 if j == n // 2 else kx
                dky = 0 if i == n // 2 else ky
                e = 0.5 * (dkx * dkx + dky * dky) * abs(c[i, j]) ** 2 / k2 ** 2 / n ** 4
                b = int(round(math.sqrt(k2)))
                expected[b] = expected.get(b, 0.0) + e
        got = dict(energy_spectrum(w))
        for b, e in expected.items():
            assert got[b] == pytest.approx(e, rel=1e-12, abs=1e-300)

    def test_energy_and_enstrophy_taylor_green(self):
        X, Y = xgrid(32)
        w = Field2D(2 * np.cos(X) * np.cos(Y))
        assert kinetic_energy(w) == pytest.approx(0.25, rel=1e-12)
        assert enstrophy(w) == pytest.approx(0.5, rel=1e-12)


def const(v, n=16):
    return Field2D(np.full((n, n), float(v)))


class TestStepwiseErrors:
    def test_single_step(self):
        r = stepwise_errors([rand_field(1)], [rand_field(2)])
        a = r.aggregates
        assert a["all_step_mse"] == a["one_step_mse"] == a["final_step_mse"] == r.per_step[0]["mse"]

    def test_all_step_is_mean(self):
        pred = [rand_field(i) for i in range(7)]
        true = [rand_field(i + 50) for i in range(7)]
        r = stepwise_errors(pred, true)
        assert abs(r.aggregates["all_step_mse"] - np.mean([s["mse"] for s in r.per_step])) < 1e-12
        assert r.horizon == 7

    def test_hand_table(self):
        # three constant frames: offsets 1, 2, 3 -> mse 1, 4, 9; gradients and divergence vanish
        true = [const(0.0), const(1.0), const(2.0)]
        pred = [const(1.0), const(3.0), const(5.0)]
        r = stepwise_errors(pred, true, SsimParams(data_range=2.0))
        assert [s["mse"] for s in r.per_step] == [1.0, 4.0, 9.0]
        assert [s["grad_err"] for s in r.per_step] == [0.0, 0.0, 0.0]
        assert [s["div_err"] for s in r.per_step] == [0.0, 0.0, 0.0]
        c1 = (0.01 * 2.0) ** 2
        for s, (a, b) in zip(r.per_step, [(1, 0), (3, 1), (5, 2)]):
            assert s["ssim"] == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), abs=1e-10)
        assert r.aggregates["all_step_mse"] == pytest.approx(14 / 3)
        assert r.aggregates["mid_step_mse"] == 4.0
        assert r.aggregates["final_step_mse"] == 9.0

    def test_default_data_range_from_trajectory(self):
        true = [const(0.0), const(4.0)]
        pred = [const(1.0), const(4.0)]
        r = stepwise_errors(pred, true)
        c1 = (0.01 * 4.0) ** 2
        assert r.per_step[0]["ssim"] == pytest.approx(c1 / (1 + c1), abs=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            stepwise_errors([const(0)], [const(0), const(1)])

    def test_csv_and_json(self):
        r = stepwise_errors([const(1.0), const(2.0)], [const(0.0), const(0.0)])
        lines = r.to_csv().strip().split("\n")
        assert lines[0] == CSV_HEADER
        assert len(lines) == 3
        assert lines[2].split(",")[0] == "2" and float(lines[2].split(",")[1]) == 4.0
        assert '"all_step_mse": 2.5' in r.to_json()

    @pytest.mark.parametrize("n,mid", [(1, 1), (2, 1), (19, 10), (99, 50), (20, 10)])
    def test_mid_step_index(self, n, mid):
        per = [{"mse": float(i + 1), "ssim": 1.0, "grad_err": 0.0, "div_err": 0.0} for i in range(n)]
        assert MetricsReport.from_steps(per).aggregates["mid_step_mse"] == float(mid)

    def test_average(self):
        r1 = stepwise_errors([const(1.0)], [const(0.0)])
        r2 = stepwise_errors([const(3.0)], [const(0.0)])
        avg = MetricsReport.average([r1, r2])
        assert avg.aggregates["all_step_mse"] == 5.0 and avg.n_samples == 2
