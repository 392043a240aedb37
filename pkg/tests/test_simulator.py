import numpy as np
import pytest

from apcsim.errors import ContractError, DataError, DomainError
from apcsim.models import Dense, ModelGraph, ReLU, ResidualAdd, SoftmaxHead
from apcsim.noise import ShotNoise, ThermalNoise, WeightNoise
from apcsim.quantization import QuantSpec, calibrate
from apcsim.simulator import Simulator, evaluate, predict
from apcsim.tensor import Tensor


def numpy_forward(model, x):
    w0, w2 = model.weights[0], model.weights[2]
    hidden = np.maximum(x @ w0["weight"].T + w0["bias"], 0.0)
    return hidden @ w2["weight"].T + w2["bias"]


@pytest.fixture
def calibrated_mlp(tiny_mlp, blobs):
    calibrate(tiny_mlp, list(blobs.feature_batches(60)), QuantSpec())
    return tiny_mlp


class TestForward:
    def test_clean_forward(self, tiny_mlp, blobs):
        np.testing.assert_allclose(predict(tiny_mlp, blobs.features), numpy_forward(tiny_mlp, blobs.features))

    def test_quantized_forward_is_close(self, calibrated_mlp, blobs):
        quantized = Simulator(calibrated_mlp, quantize=True).forward(Tensor(blobs.features)).data
        np.testing.assert_allclose(quantized, numpy_forward(calibrated_mlp, blobs.features), atol=0.1)

    def test_quantize_needs_calibration(self, tiny_mlp, blobs):
        with pytest.raises(ContractError, match="calibrat"):
            Simulator(tiny_mlp, quantize=True).forward(Tensor(blobs.features))

    def test_noise_needs_energies(self, calibrated_mlp, blobs):
        with pytest.raises(ContractError, match="energy"):
            Simulator(calibrated_mlp, noise=ThermalNoise()).forward(Tensor(blobs.features), energies={0: 1.0})

    def test_shot_noise_without_calibration(self, tiny_mlp, blobs):
        out = Simulator(tiny_mlp, noise=ShotNoise(photon_energy_j=1.0)).forward(
            Tensor(blobs.features[:8]), energies={0: 1e6, 2: 1e6})
        np.testing.assert_allclose(out.data, numpy_forward(tiny_mlp, blobs.features[:8]), atol=0.05)

    def test_reset_replays_draws(self, calibrated_mlp, blobs):
        simulator = Simulator(calibrated_mlp, noise=ThermalNoise(), quantize=True, seed=3)
        energies = {0: 0.5, 2: 0.5}
        first = simulator.forward(Tensor(blobs.features[:10]), energies=energies).data
        second = simulator.forward(Tensor(blobs.features[:10]), energies=energies).data
        assert not np.array_equal(first, second)
        simulator.reset()
        np.testing.assert_array_equal(simulator.forward(Tensor(blobs.features[:10]), energies=energies).data, first)

    def test_weight_noise_per_channel_energies(self, calibrated_mlp, blobs):
        energies = {0: np.full(5, 2.0), 2: np.array([1.0, 2.0, 4.0])}
        out = Simulator(calibrated_mlp, noise=WeightNoise(), quantize=True).forward(
            Tensor(blobs.features[:4]), energies=energies)
        assert out.shape == (4, 3)

    def test_residual_add_uses_source_output(self, rng):
        model = ModelGraph("res", (3,), 3, [Dense(3, 3), ReLU(), ResidualAdd(source=0), SoftmaxHead()])
        model.init_weights(1)
        x = rng.standard_normal((4, 3))
        pre = x @ model.weights[0]["weight"].T
        np.testing.assert_allclose(predict(model, x), np.maximum(pre, 0.0) + pre)

    def test_residual_requantized(self, rng):
        model = ModelGraph("res", (3,), 3, [Dense(3, 3), ResidualAdd(source=-1), SoftmaxHead()])
        model.init_weights(1)
        x = rng.standard_normal((20, 3))
        calibrate(model, [x], QuantSpec())
        assert 1 in model.calibration
        out = Simulator(model, quantize=True, residual_bits=2.0).forward(Tensor(x)).data
        assert len(np.unique(out)) <= 4

    def test_output_bits_quantize_layer_outputs(self, calibrated_mlp, blobs):
        out = Simulator(calibrated_mlp).forward(Tensor(blobs.features), output_bits={2: 1.0}).data
        assert len(np.unique(out)) <= 2


class TestEvaluate:
    def test_accuracy_in_percent(self, tiny_mlp, blobs):
        expected = 100.0 * np.mean(numpy_forward(tiny_mlp, blobs.features).argmax(axis=1) == blobs.labels)
        assert evaluate(tiny_mlp, blobs, batch_size=64) == pytest.approx(expected)

    def test_thread_count_does_not_change_result(self, calibrated_mlp, blobs_test):
        kwargs = dict(noise=ThermalNoise(0.05), quantize=True, energies={0: 0.1, 2: 0.1}, seed=4, batch_size=16)
        single = evaluate(calibrated_mlp, blobs_test, threads=1, **kwargs)
        assert evaluate(calibrated_mlp, blobs_test, threads=4, **kwargs) == single
        assert evaluate(calibrated_mlp, blobs_test, threads=1, **kwargs) == single

    def test_passes_and_logit_averaging(self, calibrated_mlp, blobs_test):
        kwargs = dict(noise=ThermalNoise(0.05), quantize=True, energies={0: 0.05, 2: 0.05}, batch_size=40)
        averaged = evaluate(calibrated_mlp, blobs_test, passes=3, average_logits=True, **kwargs)
        per_pass = evaluate(calibrated_mlp, blobs_test, passes=3, **kwargs)
        assert 0.0 <= averaged <= 100.0
        assert 0.0 <= per_pass <= 100.0

    def test_empty_dataset(self, tiny_mlp, blobs):
        with pytest.raises(DataError, match="empty"):
            evaluate(tiny_mlp, blobs.take(0))

    def test_passes_must_be_positive(self, tiny_mlp, blobs):
        with pytest.raises(DomainError):
            evaluate(tiny_mlp, blobs, passes=0)
