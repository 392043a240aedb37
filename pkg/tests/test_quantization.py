import numpy as np
import pytest

from apcsim.errors import CalibrationError, ContractError, DomainError
from apcsim.quantization import (
    CalibratedRange, LayerCalibration, MovingAverageObserver, PercentileObserver, QuantSpec, calibrate,
    fake_quantize, levels_for_bits, quantization_noise_var, weight_ranges,
)
from apcsim.tensor import Tensor, backward, parameter


class TestLevels:
    @pytest.mark.parametrize("bits,levels", [(1, 2), (2, 4), (4.644, 25), (6, 64), (8, 256), (0.1, 2)])
    def test_levels_for_bits(self, bits, levels):
        assert levels_for_bits(bits) == levels

    def test_non_positive_bits(self):
        with pytest.raises(DomainError):
            levels_for_bits(0)


class TestCalibratedRange:
    def test_degenerate_range_is_widened(self):
        r = CalibratedRange(5.0, 5.0)
        assert r.x_min == pytest.approx(5.0 - 5e-6)
        assert r.x_max == pytest.approx(5.0 + 5e-6)

    def test_zero_degenerate_range_uses_floor(self):
        r = CalibratedRange(0.0, 0.0)
        assert r.width == pytest.approx(2e-8)

    def test_inverted_range_rejected(self):
        with pytest.raises(CalibrationError):
            CalibratedRange(1.0, 0.0)

    def test_zero_point_is_clamped(self):
        assert CalibratedRange(-1.0, 1.0, bits=2).zero_point == 2
        assert CalibratedRange(2.0, 3.0, bits=8).zero_point == 0

    def test_dict_round_trip_per_channel(self):
        r = CalibratedRange([-1.0, -2.0], [1.0, 0.5], bits=4.0, axis=0)
        back = CalibratedRange.from_dict(r.to_dict())
        np.testing.assert_array_equal(back.x_min, r.x_min)
        assert back.axis == 0 and back.bits == 4.0


class TestFakeQuantize:
    def test_two_bit_example(self):
        out = fake_quantize(Tensor([0.4]), CalibratedRange(0.0, 1.0), bits=2)
        assert out.data[0] == pytest.approx(1 / 3)

    def test_grid_points_are_fixed(self):
        r = CalibratedRange(-1.0, 2.0, bits=4)
        grid = -1.0 + r.delta * np.arange(r.levels)
        np.testing.assert_allclose(fake_quantize(Tensor(grid), r).data, grid, atol=1e-12)

    @pytest.mark.parametrize("bits", [2, 4.644, 8])
    def test_error_within_half_step(self, rng, bits):
        r = CalibratedRange(-3.0, 5.0, bits=bits)
        x = rng.uniform(-3.0, 5.0, size=5000)
        err = np.abs(fake_quantize(Tensor(x), r).data - x)
        assert err.max() <= r.delta / 2 + 1e-12

    def test_monotone(self, rng):
        x = np.sort(rng.uniform(-2.0, 2.0, size=2000))
        out = fake_quantize(Tensor(x), CalibratedRange(-1.0, 1.0, bits=3)).data
        assert np.all(np.diff(out) >= 0)
        assert out[0] == -1.0 and out[-1] == pytest.approx(1.0)

    def test_straight_through_gradient(self, rng):
        x = parameter(rng.uniform(0.1, 0.9, size=(4, 5)))
        backward(fake_quantize(x, CalibratedRange(0.0, 1.0, bits=3)).mean())
        np.testing.assert_allclose(x.grad, np.full((4, 5), 1 / 20))

    def test_clipped_values_have_no_gradient(self):
        x = parameter([-5.0, 0.5, 5.0])
        backward(fake_quantize(x, CalibratedRange(0.0, 1.0)).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_per_channel_ranges(self):
        r = CalibratedRange([0.0, 0.0], [1.0, 10.0], bits=1, axis=0)
        out = fake_quantize(Tensor([[0.4, 0.6], [4.0, 6.0]]), r)
        np.testing.assert_array_equal(out.data, [[0.0, 1.0], [0.0, 10.0]])

    def test_per_channel_needs_axis(self):
        with pytest.raises(ContractError):
            fake_quantize(Tensor(np.ones((2, 2))), CalibratedRange([0.0, 0.0], [1.0, 1.0]))


class TestQuantizationNoise:
    def test_eight_bit_unit_range(self):
        assert quantization_noise_var(CalibratedRange(0.0, 1.0), 8) == pytest.approx((1 / 255) ** 2 / 12)

    def test_doubling_range_quadruples_variance(self):
        narrow = quantization_noise_var(CalibratedRange(0.0, 1.0), 5)
        wide = quantization_noise_var(CalibratedRange(0.0, 2.0), 5)
        assert wide == pytest.approx(4 * narrow)

    def test_matches_empirical_error_variance(self, rng):
        r = CalibratedRange(0.0, 1.0, bits=6)
        x = rng.uniform(0.0, 1.0, size=200_000)
        err = fake_quantize(Tensor(x), r).data - x
        assert np.var(err) == pytest.approx(quantization_noise_var(r), rel=0.03)

    def test_realized_levels_for_fractional_bits(self):
        r = CalibratedRange(0.0, 24.0)
        assert quantization_noise_var(r, 4.644, realized=True) == pytest.approx(1 / 12)


class TestObservers:
    def test_percentile_excludes_outlier(self):
        data = np.append(np.arange(10001.0), 1e6)
        observer = PercentileObserver(99.99)
        observer.update(data)
        lo, hi = observer.result()
        assert hi == pytest.approx(np.percentile(data, 99.99))
        assert hi <= 10000.0
        assert lo == pytest.approx(np.percentile(data, 0.01))

    def test_moving_average_with_decay(self):
        observer = MovingAverageObserver(decay=0.5)
        observer.update(np.array([0.0, 1.0]))
        observer.update(np.array([0.0, 3.0]))
        assert observer.result() == (0.0, 2.0)

    def test_moving_average_defaults_to_running_mean(self):
        observer = MovingAverageObserver()
        for hi in (1.0, 3.0, 5.0):
            observer.update(np.array([0.0, hi]))
        assert observer.result()[1] == pytest.approx(3.0)

    def test_moving_average_stops_after_max_batches(self):
        observer = MovingAverageObserver(max_batches=2)
        for hi in (1.0, 3.0, 100.0):
            observer.update(np.array([0.0, hi]))
        assert observer.result()[1] == pytest.approx(2.0)


class TestQuantSpec:
    @pytest.mark.parametrize("kwargs", [{"bits": 0}, {"percentile": 50}, {"percentile": 100.5}])
    def test_domain_checks(self, kwargs):
        with pytest.raises(DomainError):
            QuantSpec(**kwargs)

    def test_unknown_range_mode(self):
        with pytest.raises(ContractError):
            QuantSpec(range_mode="median")


class TestCalibrate:
    def test_ranges_for_every_noisy_layer(self, tiny_mlp, blobs):
        batches = list(blobs.feature_batches(60))
        calibration = calibrate(tiny_mlp, batches, QuantSpec())
        assert sorted(calibration) == [0, 2]
        assert tiny_mlp.calibration is calibration

        first = calibration[0]
        assert first.input.bounds == (pytest.approx(blobs.features.min()), pytest.approx(blobs.features.max()))
        weight = tiny_mlp.weights[0]["weight"]
        np.testing.assert_allclose(first.weight.x_min, weight.min(axis=1))
        np.testing.assert_allclose(first.weight.x_max, weight.max(axis=1))
        assert first.weight.axis == 0

    def test_weights_never_use_percentile(self, tiny_mlp, blobs):
        calibration = calibrate(tiny_mlp, list(blobs.feature_batches(60)), QuantSpec(range_mode="percentile"))
        weight = tiny_mlp.weights[2]["weight"]
        assert calibration[2].weight_range() == (pytest.approx(weight.min()), pytest.approx(weight.max()))
        assert calibration[2].range_mode == "percentile"

    def test_empty_stream(self, tiny_mlp):
        with pytest.raises(CalibrationError):
            calibrate(tiny_mlp, [], QuantSpec())

    def test_conv_weights_per_output_channel(self, tiny_cnn, image_blobs):
        calibration = calibrate(tiny_cnn, list(image_blobs.feature_batches(30)), QuantSpec())
        weight = tiny_cnn.weights[0]["weight"]
        np.testing.assert_allclose(calibration[0].weight.x_max, weight.reshape(2, -1).max(axis=1))

    def test_weight_ranges_per_tensor(self):
        r = weight_ranges(np.array([[1.0, -2.0], [3.0, 0.0]]), QuantSpec(granularity="per_tensor"))
        assert (r.x_min, r.x_max) == (-2.0, 3.0)

    def test_layer_calibration_round_trip(self, tiny_mlp, blobs):
        calibration = calibrate(tiny_mlp, list(blobs.feature_batches(60)), QuantSpec())
        back = LayerCalibration.from_dict(calibration[0].to_dict())
        assert back.input_range() == calibration[0].input_range()
        np.testing.assert_array_equal(back.weight.x_max, calibration[0].weight.x_max)
