"""
Forward / backward passes, Adam and the checkpoint format.
"""

import struct
from pathlib import Path
from typing import Tuple

import numpy as np
import pytest
from pytest_mock import MockerFixture

from nlc_lab import neural
from nlc_lab.errors import (
    CorruptPayload,
    DimMismatch,
    IoFailure,
    NonFiniteGradient,
    VersionMismatch,
)
from nlc_lab.neural import Gradients, MlpNet
from nlc_lab.numeric_core import STREAM_INIT, fork, gaussian_mat

GRADIENT_SHAPES = [
    (neural.ROLE_DENOISER, (4, 3)),
    (neural.ROLE_DENOISER, (6, 8, 5)),
    (neural.ROLE_DENOISER, (5, 7, 7, 4)),
    (neural.ROLE_CORRECTOR, (4, 6, 1)),
    (neural.ROLE_CORRECTOR, (9, 5, 5, 5, 1)),
]


def _matrix_chain(net: MlpNet, x: np.ndarray) -> np.ndarray:
    """
    Straight line re-evaluation, layer by layer.
    :param net: Network.
    :param x: Single input.
    :return: Output.
    """
    activation = x
    for index, (weight, bias) in enumerate(zip(net.weights, net.biases)):
        z = weight @ activation + bias
        activation = z if index == len(net.weights) - 1 else z / (1.0 + np.exp(-z))
    return activation


def test_zero_net_outputs_zero() -> None:
    """
    :return: None
    """
    net = neural.zero_mlp(neural.ROLE_DENOISER, (5, 8, 4))
    np.testing.assert_array_equal(neural.forward(net, np.ones(5)), np.zeros(4))


def test_identity_linear_net() -> None:
    """
    One linear layer with W = I and b = 0 returns its input.
    :return: None
    """
    net = neural.zero_mlp(neural.ROLE_GENERIC, (3, 3))._replace(weights=(np.eye(3),))
    x = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(neural.forward(net, x), x)


@pytest.mark.parametrize("role,dims", GRADIENT_SHAPES)
def test_forward_matches_matrix_chain(role: str, dims: Tuple[int, ...]) -> None:
    """
    Batched forward agrees with an independent evaluation, one point at a time.
    :param role: Network role.
    :param dims: Layer dims.
    :return: None
    """
    net = neural.init_mlp(role, dims, fork(len(dims), STREAM_INIT))
    batch = gaussian_mat(fork(1, STREAM_INIT, 1), 6, dims[0])
    outputs = neural.forward(net, batch)
    assert outputs.shape == (6, dims[-1])
    for x, output in zip(batch, outputs):
        np.testing.assert_allclose(output, _matrix_chain(net, x), rtol=1e-12, atol=1e-12)


def test_linear_backward_is_outer_product() -> None:
    """
    For a single linear layer dW = upstream (x) input.
    :return: None
    """
    net = neural.init_mlp(neural.ROLE_GENERIC, (3, 2), fork(0, STREAM_INIT))
    x = np.array([1.0, 2.0, -1.0])
    upstream = np.array([0.5, -3.0])
    grads = neural.backward(net, x, upstream)
    np.testing.assert_allclose(grads.weights[0], np.outer(upstream, x))
    np.testing.assert_allclose(grads.biases[0], upstream)


def test_zero_upstream_gives_zero_gradients() -> None:
    """
    :return: None
    """
    net = neural.init_mlp(neural.ROLE_DENOISER, (4, 6, 3), fork(0, STREAM_INIT))
    grads = neural.backward(net, np.ones((2, 4)), np.zeros((2, 3)))
    assert not np.any(neural.flatten_grads(grads))


@pytest.mark.parametrize("role,dims", GRADIENT_SHAPES)
def test_gradients_match_finite_differences(role: str, dims: Tuple[int, ...]) -> None:
    """
    Central differences with h = 1e-5 on up to 100 random coordinates.
    :param role: Network role.
    :param dims: Layer dims.
    :return: None
    """
    rng = fork(7, STREAM_INIT, len(dims))
    net = neural.init_mlp(role, dims, rng)
    inputs = gaussian_mat(rng, 5, dims[0])
    upstream = gaussian_mat(rng, 5, dims[-1])

    def objective(flat: np.ndarray) -> float:
        return float(np.sum(upstream * neural.forward(neural.unflatten_params(net, flat), inputs)))

    analytic = neural.flatten_grads(neural.backward(net, inputs, upstream))
    params = neural.flatten_params(net)
    step = 1e-5
    picks = rng.generator.choice(params.size, size=min(100, params.size), replace=False)
    for index in picks:
        plus = params.copy()
        minus = params.copy()
        plus[index] += step
        minus[index] -= step
        numeric = (objective(plus) - objective(minus)) / (2 * step)
        assert abs(numeric - analytic[index]) <= 1e-6 * max(abs(analytic[index]), 1e-2)


def test_corrector_floor() -> None:
    """
    The corrector output never drops below the floor, and no gradient flows through the floor.
    :return: None
    """
    net = neural.zero_mlp(neural.ROLE_CORRECTOR, (3, 1))._replace(biases=(np.array([-5.0]),))
    assert neural.forward(net, np.zeros(3))[0] == neural.RESIDUAL_FLOOR
    grads = neural.backward(net, np.zeros(3), np.ones(1))
    assert not np.any(neural.flatten_grads(grads))


def test_shape_errors() -> None:
    """
    :return: None
    """
    net = neural.zero_mlp(neural.ROLE_DENOISER, (4, 3))
    with pytest.raises(DimMismatch):
        neural.forward(net, np.zeros(3))
    with pytest.raises(DimMismatch):
        neural.backward(net, np.zeros(4), np.zeros(4))
    with pytest.raises(DimMismatch):
        neural.zero_mlp(neural.ROLE_DENOISER, (4, 4))


def _scalar_net(value: float) -> MlpNet:
    return neural.zero_mlp(neural.ROLE_GENERIC, (1, 1))._replace(weights=(np.array([[value]]),))


def _scalar_grads(gradient: float) -> Gradients:
    return Gradients(weights=(np.array([[gradient]]),), biases=(np.zeros(1),))


def test_adam_zero_gradient() -> None:
    """
    :return: None
    """
    net = _scalar_net(0.3)
    state = neural.init_adam(net)
    updated, new_state = neural.adam_step(state, net, _scalar_grads(0.0))
    np.testing.assert_array_equal(neural.flatten_params(updated), neural.flatten_params(net))
    assert new_state.step == 1


def test_adam_first_step_magnitude() -> None:
    """
    Bias correction makes the first step lr long.
    :return: None
    """
    net = _scalar_net(0.0)
    updated, _ = neural.adam_step(neural.init_adam(net, lr=0.1), net, _scalar_grads(1.0))
    assert updated.weights[0][0, 0] == pytest.approx(-0.1, rel=1e-7)


def test_adam_quadratic_bowl() -> None:
    """
    Minimizing w^2 from w = 1 matches a scalar reference implementation and gets close to 0.
    :return: None
    """
    net = _scalar_net(1.0)
    state = neural.init_adam(net, lr=0.01)
    w, m, v = 1.0, 0.0, 0.0
    for step in range(1, 2001):
        net, state = neural.adam_step(state, net, _scalar_grads(2.0 * net.weights[0][0, 0]))
        gradient = 2.0 * w
        m = 0.9 * m + 0.1 * gradient
        v = 0.999 * v + 0.001 * gradient * gradient
        w -= 0.01 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
    assert net.weights[0][0, 0] == pytest.approx(w, abs=1e-12)
    assert abs(w) < 0.01


def test_adam_rejects_non_finite() -> None:
    """
    :return: None
    """
    net = _scalar_net(0.0)
    with pytest.raises(NonFiniteGradient):
        neural.adam_step(neural.init_adam(net), net, _scalar_grads(float("nan")))


def test_network_input_preconditioning() -> None:
    """
    :return: None
    """
    x = np.array([3.0, 4.0])
    np.testing.assert_allclose(
        neural.network_input(x, 2.0), [3.0 / np.sqrt(5.0), 4.0 / np.sqrt(5.0), np.log(2.0)]
    )
    batch = neural.network_input(np.ones((3, 2)), np.array([1.0, 2.0, 3.0]))
    assert batch.shape == (3, 3)
    np.testing.assert_allclose(batch[:, 2], np.log([1.0, 2.0, 3.0]))


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    """
    Parameters and optimizer state come back bit for bit.
    :param tmp_path: Fixture.
    :return: None
    """
    net = neural.init_mlp(neural.ROLE_CORRECTOR, (5, 7, 1), fork(2, STREAM_INIT))
    state = neural.init_adam(net)
    net, state = neural.adam_step(state, net, neural.backward(net, np.ones(5), np.ones(1)))
    path = tmp_path / "corrector.nlcn"
    meta = neural.CheckpointMeta(seed=2, iterations=1, loss=0.25)
    neural.save_checkpoint(net, state, path, meta)

    checkpoint = neural.read_checkpoint(path)
    assert checkpoint.meta == meta
    assert checkpoint.net.role == neural.ROLE_CORRECTOR
    assert checkpoint.net.layer_dims == (5, 7, 1)
    np.testing.assert_array_equal(
        neural.flatten_params(checkpoint.net), neural.flatten_params(net)
    )
    assert checkpoint.state is not None
    assert checkpoint.state.step == 1
    np.testing.assert_array_equal(checkpoint.state.second_moment, state.second_moment)

    neural.save_checkpoint(net, None, path)
    loaded, loaded_state = neural.load_checkpoint(path)
    assert loaded_state is None
    np.testing.assert_array_equal(neural.flatten_params(loaded), neural.flatten_params(net))


def test_checkpoint_corruption(tmp_path: Path) -> None:
    """
    Truncation and bit flips are `CorruptPayload`, a bumped version is `VersionMismatch`.
    :param tmp_path: Fixture.
    :return: None
    """
    net = neural.init_mlp(neural.ROLE_DENOISER, (4, 6, 3), fork(3, STREAM_INIT))
    path = tmp_path / "denoiser.nlcn"
    neural.save_checkpoint(net, None, path)
    raw = path.read_bytes()

    path.write_bytes(raw[:-3])
    with pytest.raises(CorruptPayload):
        neural.load_checkpoint(path)

    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CorruptPayload):
        neural.load_checkpoint(path)

    path.write_bytes(raw[:4] + struct.pack("<I", neural.CHECKPOINT_VERSION + 1) + raw[8:])
    with pytest.raises(VersionMismatch):
        neural.load_checkpoint(path)


@pytest.mark.parametrize(
    "document",
    ["[1, 2]", '"seed"', "3", '{"seed": "abc"}', '{"loss": [1.0]}', '{"iterations": null}'],
)
def test_checkpoint_malformed_metadata(
    tmp_path: Path, mocker: MockerFixture, document: str
) -> None:
    """
    Metadata that passes the checksum but is not the expected JSON object is still corrupt.
    :param tmp_path: Fixture.
    :param mocker: Fixture.
    :param document: Metadata JSON written in place of the real one.
    :return: None
    """
    net = neural.init_mlp(neural.ROLE_DENOISER, (4, 6, 3), fork(4, STREAM_INIT))
    path = tmp_path / "denoiser.nlcn"
    mocker.patch.object(neural.json, "dumps", return_value=document)
    neural.save_checkpoint(net, None, path)
    mocker.stopall()

    with pytest.raises(CorruptPayload) as error:
        neural.load_checkpoint(path)
    assert isinstance(error.value, IoFailure)
