"""
Dense feedforward networks with hand written backpropagation, Adam, and checkpoints.

The same `MlpNet` type is used for the denoiser eps_theta (output n) and the noise level corrector
r_theta (output 1). Hidden layers use SiLU (z * sigmoid(z)), the output layer is linear. The
corrector's output is floored at `RESIDUAL_FLOOR` so that 1 + r stays positive.

Networks never see raw x: the input is [x / sqrt(1 + sigma^2), log sigma], see `network_input`.
The 1 / sqrt(1 + sigma^2) factor is the variance preserving scaling of x, it keeps inputs O(1)
from sigma ~ 1e-2 to sigma ~ 1e2.
"""

import functools
import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from nlc_lab import artifacts
from nlc_lab.errors import (
    CorruptPayload,
    DimMismatch,
    InvalidRange,
    NonFiniteGradient,
    VersionMismatch,
)
from nlc_lab.numeric_core import Rng, uniform

LOGGER = logging.getLogger(__name__)

ROLE_DENOISER = "denoiser"
ROLE_CORRECTOR = "corrector"
# Nets that are neither, only used to check the machinery itself.
ROLE_GENERIC = "generic"

_ROLE_CODES = {ROLE_DENOISER: 0, ROLE_CORRECTOR: 1, ROLE_GENERIC: 2}

# 1 + r is never allowed below 0.01.
RESIDUAL_FLOOR = -0.99

# Per the image-scale training setup.
DEFAULT_LEARNING_RATE = 3e-4
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"NLCN"
CHECKPOINT_VERSION = 1
_CHECKPOINT_PREFIX = struct.Struct("<4sIBI")
_CHECKPOINT_TRAILER = struct.Struct("<BII")
_ADAM_SCALARS = 5

DenoiserFn = Callable[[np.ndarray, float], np.ndarray]
ResidualFn = Callable[[np.ndarray, float], float]


class MlpNet(NamedTuple):
    """
    Frozen network parameters. `weights[i]` is (layer_dims[i + 1], layer_dims[i]).
    """

    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    role: str


class Gradients(NamedTuple):
    """
    Parameter gradients, shaped like the net they belong to.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]


class AdamState(NamedTuple):
    """
    Optimizer state. The moments are stored flat, in `flatten_params` order.
    """

    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float
    beta1: float
    beta2: float
    eps: float


class CheckpointMeta(NamedTuple):
    """
    Where a checkpoint came from.
    """

    seed: int
    iterations: int
    loss: float


class Checkpoint(NamedTuple):
    """
    Everything stored in a checkpoint file.
    """

    version: int
    net: MlpNet
    state: Optional[AdamState]
    meta: CheckpointMeta


def validate_net(net: MlpNet) -> MlpNet:
    """
    Check that the parameter shapes agree with `layer_dims` and with the role.
    :param net: Network to check.
    :return: The same network.
    """
    if net.role not in _ROLE_CODES:
        raise InvalidRange(f"unknown role {net.role!r}")
    if len(net.layer_dims) < 2 or min(net.layer_dims) < 1:
        raise DimMismatch(f"bad layer dims {net.layer_dims}")
    layers = len(net.layer_dims) - 1
    if len(net.weights) != layers or len(net.biases) != layers:
        raise DimMismatch(f"{layers} layers need {layers} weights and biases")
    for index, (weight, bias) in enumerate(zip(net.weights, net.biases)):
        expected = (net.layer_dims[index + 1], net.layer_dims[index])
        if weight.shape != expected or bias.shape != (expected[0],):
            raise DimMismatch(f"layer {index} should be {expected}, got {weight.shape}")
    if net.role == ROLE_DENOISER and net.layer_dims[0] != net.layer_dims[-1] + 1:
        raise DimMismatch("a denoiser maps n + 1 inputs to n outputs")
    if net.role == ROLE_CORRECTOR and net.layer_dims[-1] != 1:
        raise DimMismatch("a corrector has a single output")
    return net


def mlp_dims(role: str, n: int, hidden: int, layers: int) -> Tuple[int, ...]:
    """
    Layer dims for one of the two roles, e.g. `mlp_dims(ROLE_DENOISER, 100, 128, 5)`.
    :param role: Denoiser or corrector.
    :param n: Data dimension.
    :param hidden: Hidden width.
    :param layers: Number of dense layers (hidden layers + output layer).
    :return: Dims from input to output.
    """
    if layers < 1:
        raise InvalidRange(f"need at least one layer, got {layers}")
    output = n if role == ROLE_DENOISER else 1
    return (n + 1,) + tuple(hidden for _ in range(layers - 1)) + (output,)


def init_mlp(role: str, layer_dims: Sequence[int], rng: Rng) -> MlpNet:
    """
    Fan-in scaled uniform init, every parameter of layer i ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    :param role: Role tag.
    :param layer_dims: Dims from input to output.
    :param rng: Source of the draws.
    :return: Fresh network.
    """
    dims = tuple(int(dim) for dim in layer_dims)
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(uniform(rng, -bound, bound, fan_out * fan_in).reshape(fan_out, fan_in))
        biases.append(uniform(rng, -bound, bound, fan_out))
    return validate_net(
        MlpNet(layer_dims=dims, weights=tuple(weights), biases=tuple(biases), role=role)
    )


def zero_mlp(role: str, layer_dims: Sequence[int]) -> MlpNet:
    """
    :param role: Role tag.
    :param layer_dims: Dims from input to output.
    :return: A network with every parameter set to zero.
    """
    dims = tuple(int(dim) for dim in layer_dims)
    return validate_net(
        MlpNet(
            layer_dims=dims,
            weights=tuple(np.zeros((out, inp)) for inp, out in zip(dims[:-1], dims[1:])),
            biases=tuple(np.zeros(out) for out in dims[1:]),
            role=role,
        )
    )


def _silu(z: np.ndarray) -> np.ndarray:
    result: np.ndarray = z * expit(z)
    return result


def _silu_derivative(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    result: np.ndarray = s * (1.0 + z * (1.0 - s))
    return result


def _as_batch(net: MlpNet, inputs: np.ndarray) -> np.ndarray:
    """
    :param net: Network the inputs are for.
    :param inputs: (in,) or (batch, in).
    :return: (batch, in) view.
    """
    batch = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if batch.ndim != 2 or batch.shape[1] != net.layer_dims[0]:
        raise DimMismatch(f"net expects {net.layer_dims[0]} inputs, got shape {np.shape(inputs)}")
    return batch


def _forward_cache(net: MlpNet, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    Run the net keeping what backprop needs.
    :param net: Network.
    :param batch: (batch, in).
    :return: (layer inputs, pre-activations) per layer. The last pre-activation is the raw output.
    """
    layer_inputs: List[np.ndarray] = []
    pre_activations: List[np.ndarray] = []
    activation = batch
    last = len(net.weights) - 1
    for index, (weight, bias) in enumerate(zip(net.weights, net.biases)):
        layer_inputs.append(activation)
        z = activation @ weight.T + bias
        pre_activations.append(z)
        activation = z if index == last else _silu(z)
    return layer_inputs, pre_activations


def forward(net: MlpNet, inputs: np.ndarray) -> np.ndarray:
    """
    Evaluate the network.
    :param net: Network.
    :param inputs: (in,) or (batch, in).
    :return: (out,) or (batch, out), matching the rank of `inputs`.
    """
    batch = _as_batch(net, inputs)
    _, pre_activations = _forward_cache(net, batch)
    output = pre_activations[-1]
    if net.role == ROLE_CORRECTOR:
        output = np.maximum(output, RESIDUAL_FLOOR)
    if np.ndim(inputs) == 1:
        single: np.ndarray = output[0]
        return single
    return output


def backward(net: MlpNet, inputs: np.ndarray, upstream_grad: np.ndarray) -> Gradients:
    """
    Gradients of <upstream_grad, forward(net, inputs)> with respect to every parameter, summed
    over the batch. Where the corrector floor is active the gradient is zero.
    :param net: Network.
    :param inputs: (in,) or (batch, in).
    :param upstream_grad: (out,) or (batch, out), same rank as `inputs`.
    :return: Parameter gradients.
    """
    batch = _as_batch(net, inputs)
    grad = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    if grad.shape != (batch.shape[0], net.layer_dims[-1]):
        raise DimMismatch(
            f"upstream grad should be {(batch.shape[0], net.layer_dims[-1])}, got {grad.shape}"
        )

    layer_inputs, pre_activations = _forward_cache(net, batch)
    if net.role == ROLE_CORRECTOR:
        grad = grad * (pre_activations[-1] > RESIDUAL_FLOOR)

    weight_grads: List[np.ndarray] = [np.empty(0) for _ in net.weights]
    bias_grads: List[np.ndarray] = [np.empty(0) for _ in net.biases]
    for index in reversed(range(len(net.weights))):
        weight_grads[index] = grad.T @ layer_inputs[index]
        bias_grads[index] = grad.sum(axis=0)
        if index > 0:
            grad = (grad @ net.weights[index]) * _silu_derivative(pre_activations[index - 1])

    return Gradients(weights=tuple(weight_grads), biases=tuple(bias_grads))


def parameter_count(net: MlpNet) -> int:
    """
    :param net: Network.
    :return: Total number of scalars in the weights and biases.
    """
    return sum(w.size + b.size for w, b in zip(net.weights, net.biases))


def flatten_params(net: MlpNet) -> np.ndarray:
    """
    :param net: Network.
    :return: Every parameter in one vector, layer by layer, weight (row major) then bias.
    """
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(net.weights, net.biases)]
    )


def flatten_grads(grads: Gradients) -> np.ndarray:
    """
    :param grads: Gradients.
    :return: `flatten_params` ordering of the gradients.
    """
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(grads.weights, grads.biases)]
    )


def unflatten_params(net: MlpNet, flat: np.ndarray) -> MlpNet:
    """
    Inverse of `flatten_params`.
    :param net: Network whose layout to use.
    :param flat: Parameter vector.
    :return: New network with the given parameters.
    """
    if flat.shape != (parameter_count(net),):
        raise DimMismatch(f"expected {parameter_count(net)} parameters, got {flat.shape}")
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    offset = 0
    for weight, bias in zip(net.weights, net.biases):
        weights.append(flat[offset : offset + weight.size].reshape(weight.shape).copy())
        offset += weight.size
        biases.append(flat[offset : offset + bias.size].copy())
        offset += bias.size
    return net._replace(weights=tuple(weights), biases=tuple(biases))


def init_adam(
    net: MlpNet,
    lr: float = DEFAULT_LEARNING_RATE,
    beta1: float = DEFAULT_BETA1,
    beta2: float = DEFAULT_BETA2,
    eps: float = DEFAULT_ADAM_EPS,
) -> AdamState:
    """
    :param net: Network the optimizer is for.
    :param lr: Learning rate.
    :param beta1: First moment decay.
    :param beta2: Second moment decay.
    :param eps: Denominator guard.
    :return: Zeroed optimizer state.
    """
    if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
        raise InvalidRange(f"bad adam settings lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
    count = parameter_count(net)
    return AdamState(
        step=0,
        first_moment=np.zeros(count),
        second_moment=np.zeros(count),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: AdamState, net: MlpNet, grads: Gradients) -> Tuple[MlpNet, AdamState]:
    """
    One bias corrected Adam update.
    :param state: Current optimizer state.
    :param net: Current parameters.
    :param grads: Gradients of the loss at `net`.
    :return: (updated net, updated state).
    """
    flat_grad = flatten_grads(grads)
    if not np.all(np.isfinite(flat_grad)):
        raise NonFiniteGradient(f"non-finite gradient at adam step {state.step + 1}")

    step = state.step + 1
    first = state.beta1 * state.first_moment + (1.0 - state.beta1) * flat_grad
    second = state.beta2 * state.second_moment + (1.0 - state.beta2) * flat_grad * flat_grad
    first_hat = first / (1.0 - state.beta1**step)
    second_hat = second / (1.0 - state.beta2**step)

    params = flatten_params(net) - state.lr * first_hat / (np.sqrt(second_hat) + state.eps)
    return (
        unflatten_params(net, params),
        state._replace(step=step, first_moment=first, second_moment=second),
    )


def network_input(x: np.ndarray, sigma: Union[float, np.ndarray]) -> np.ndarray:
    """
    Preconditioned network input [x / sqrt(1 + sigma^2), log sigma].
    :param x: (n,) or (batch, n).
    :param sigma: Scalar, or (batch,) noise levels.
    :return: (n + 1,) or (batch, n + 1).
    """
    points = np.asarray(x, dtype=np.float64)
    sigmas = np.asarray(sigma, dtype=np.float64)
    if np.any(sigmas <= 0):
        raise InvalidRange("noise levels fed to a network must be positive")
    if points.ndim == 1:
        scale = 1.0 / np.sqrt(1.0 + float(sigmas) ** 2)
        return np.concatenate([points * scale, [np.log(float(sigmas))]])
    column = np.broadcast_to(sigmas, (points.shape[0],))[:, np.newaxis]
    return np.concatenate([points / np.sqrt(1.0 + column**2), np.log(column)], axis=1)


def evaluate_denoiser(net: MlpNet, x: np.ndarray, sigma: Union[float, np.ndarray]) -> np.ndarray:
    """
    eps_theta(x, sigma).
    :param net: Denoiser.
    :param x: (n,) or (batch, n).
    :param sigma: Noise level(s).
    :return: Predicted noise, same shape as `x`.
    """
    return forward(net, network_input(x, sigma))


def evaluate_residual(net: MlpNet, x: np.ndarray, sigma: float) -> float:
    """
    r_theta(x, sigma) for a single point.
    :param net: Corrector.
    :param x: (n,).
    :param sigma: Scheduled noise level.
    :return: The residual, already floored.
    """
    return float(forward(net, network_input(x, sigma))[0])


def denoiser_fn(net: MlpNet) -> DenoiserFn:
    """
    :param net: Denoiser.
    :return: Picklable `(x, sigma) -> eps` callable for the samplers.
    """
    return functools.partial(evaluate_denoiser, validate_net(net))


def residual_fn(net: MlpNet) -> ResidualFn:
    """
    :param net: Corrector.
    :return: Picklable `(x, sigma) -> r` callable for the samplers.
    """
    return functools.partial(evaluate_residual, validate_net(net))


def _adam_payload(state: AdamState) -> np.ndarray:
    scalars = np.array(
        [state.step, state.lr, state.beta1, state.beta2, state.eps], dtype=np.float64
    )
    return np.concatenate([scalars, state.first_moment, state.second_moment])


def save_checkpoint(
    net: MlpNet,
    state: Optional[AdamState],
    path: Union[str, Path],
    meta: CheckpointMeta = CheckpointMeta(seed=0, iterations=0, loss=float("nan")),
) -> None:
    """
    Layout, all little endian: magic "NLCN", version u32, role u8, dim count u32, dims u32 each,
    has-state u8, metadata length u32, CRC32 u32 of everything that follows, metadata JSON, then
    the float64 payload (parameters, then optionally adam scalars and moments).
    :param net: Network to store.
    :param state: Optimizer state, or None.
    :param path: Destination.
    :param meta: Training run metadata.
    :return: None
    """
    validate_net(net)
    payload = flatten_params(net)
    if state is not None:
        payload = np.concatenate([payload, _adam_payload(state)])

    meta_bytes = json.dumps(
        {
            "seed": meta.seed,
            "iterations": meta.iterations,
            "loss": artifacts.finite_or_none(meta.loss),
        },
        sort_keys=True,
    ).encode("utf-8")
    body = meta_bytes + np.ascontiguousarray(payload, dtype="<f8").tobytes()

    header = (
        _CHECKPOINT_PREFIX.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _ROLE_CODES[net.role], len(net.layer_dims)
        )
        + struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims)
        + _CHECKPOINT_TRAILER.pack(
            1 if state is not None else 0, len(meta_bytes), zlib.crc32(body) & 0xFFFFFFFF
        )
    )
    artifacts.atomic_write_bytes(path, header + body)
    LOGGER.info("Wrote %s checkpoint %s", net.role, path)


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Load everything stored by `save_checkpoint`.
    :param path: Checkpoint file.
    :return: The checkpoint.
    """
    raw = artifacts.read_bytes(path)
    if len(raw) < _CHECKPOINT_PREFIX.size:
        raise CorruptPayload(f"{path} is truncated")

    magic, version, role_code, dim_count = _CHECKPOINT_PREFIX.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptPayload(f"{path} has bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path} is checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )

    offset = _CHECKPOINT_PREFIX.size
    if len(raw) < offset + 4 * dim_count + _CHECKPOINT_TRAILER.size:
        raise CorruptPayload(f"{path} is truncated")
    dims = struct.unpack_from(f"<{dim_count}I", raw, offset)
    offset += 4 * dim_count
    has_state, meta_length, checksum = _CHECKPOINT_TRAILER.unpack_from(raw, offset)
    offset += _CHECKPOINT_TRAILER.size

    body = raw[offset:]
    if zlib.crc32(body) & 0xFFFFFFFF != checksum:
        raise CorruptPayload(f"{path} failed its checksum")

    roles = {code: role for role, code in _ROLE_CODES.items()}
    if role_code not in roles:
        raise CorruptPayload(f"{path} has unknown role code {role_code}")
    template = zero_mlp(roles[role_code], dims)
    count = parameter_count(template)

    floats_length = len(body) - meta_length
    if meta_length > len(body) or floats_length % 8 != 0:
        raise CorruptPayload(f"{path} has a malformed payload")
    payload = np.frombuffer(body, dtype="<f8", offset=meta_length).astype(np.float64)
    expected = count + (_ADAM_SCALARS + 2 * count if has_state else 0)
    if payload.size != expected:
        raise CorruptPayload(f"{path} holds {payload.size} values, expected {expected}")

    net = unflatten_params(template, payload[:count])
    state = None
    if has_state:
        scalars = payload[count : count + _ADAM_SCALARS]
        moments = payload[count + _ADAM_SCALARS :]
        state = AdamState(
            step=int(scalars[0]),
            first_moment=moments[:count].copy(),
            second_moment=moments[count:].copy(),
            lr=float(scalars[1]),
            beta1=float(scalars[2]),
            beta2=float(scalars[3]),
            eps=float(scalars[4]),
        )

    return Checkpoint(
        version=version, net=net, state=state, meta=_parse_meta(body[:meta_length], path)
    )


def _parse_meta(raw: bytes, path: Union[str, Path]) -> CheckpointMeta:
    """
    :param raw: Metadata JSON bytes.
    :param path: For error messages.
    :return: Parsed metadata.
    """
    try:
        document = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptPayload(f"{path} has unreadable metadata") from e
    if not isinstance(document, dict):
        raise CorruptPayload(f"{path} metadata must be a JSON object")
    loss = document.get("loss")
    try:
        return CheckpointMeta(
            seed=int(document.get("seed", 0)),
            iterations=int(document.get("iterations", 0)),
            loss=float("nan") if loss is None else float(loss),
        )
    except (TypeError, ValueError) as e:
        raise CorruptPayload(f"{path} has malformed metadata") from e


def load_checkpoint(path: Union[str, Path]) -> Tuple[MlpNet, Optional[AdamState]]:
    """
    :param path: Checkpoint file.
    :return: (net, optimizer state or None).
    """
    checkpoint = read_checkpoint(path)
    return checkpoint.net, checkpoint.state
