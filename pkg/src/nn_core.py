"""
This module provides the feed-forward network stack every learned component is built on.

Networks are stacks of affine layers, each optionally layer-normalized and followed by
a relu, tanh or identity nonlinearity. Forward passes record a tape that backward uses
to compute exact parameter and input gradients; an Adam optimizer, a squashed-Gaussian
policy head and a flat float32 checkpoint format complete the stack. Everything runs in
float64 numpy on batches of row vectors; a single vector is treated as a batch of one.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractViolation, DatasetParseError

logger: logging.Logger = logging.getLogger("Wombet")

ACTIVATIONS: Tuple[str, ...] = ("relu", "tanh", "identity")
LAYER_NORM_EPS: float = 1e-5
LOG_STD_MIN: float = -10.0
LOG_STD_MAX: float = 2.0
_ACTION_LIMIT: float = 1.0 - 1e-7
_HALF_LOG_TWO_PI: float = 0.5 * math.log(2.0 * math.pi)
_CHECKPOINT_FORMAT: str = "wombet-params"
_CHECKPOINT_VERSION: int = 1


@dataclass
class Layer:
    """One affine layer with optional layer normalization and a nonlinearity."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    gain: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None

    @property
    def layer_norm(self) -> bool:
        """Whether the pre-activation is layer-normalized."""
        return self.gain is not None

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in checkpoint order: weight, bias, then gain and shift."""
        params: List[np.ndarray] = [self.weight, self.bias]
        if self.gain is not None and self.shift is not None:
            params.extend([self.gain, self.shift])
        return params


@dataclass
class Mlp:
    """A stack of layers whose dimensions compose."""

    layers: List[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ContractViolation("an Mlp needs at least one layer")
        for index, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ContractViolation(
                    f"layer {index}: unknown activation '{layer.activation}'"
                )
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ContractViolation(f"layer {index}: weight/bias shapes disagree")
            if (layer.gain is None) != (layer.shift is None):
                raise ContractViolation(f"layer {index}: gain and shift come in pairs")
            if layer.gain is not None and layer.gain.shape != layer.bias.shape:
                raise ContractViolation(f"layer {index}: layer-norm shape mismatch")
            if index > 0 and self.layers[index - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ContractViolation(
                    f"layer {index}: input dim {layer.weight.shape[0]} does not match "
                    f"previous output dim {self.layers[index - 1].weight.shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        """Input dimension of the first layer."""
        return int(self.layers[0].weight.shape[0])

    @property
    def out_dim(self) -> int:
        """Output dimension of the last layer."""
        return int(self.layers[-1].weight.shape[1])

    def parameters(self) -> List[np.ndarray]:
        """Every parameter array, layer by layer."""
        return [p for layer in self.layers for p in layer.parameters()]

    def shapes(self) -> List[Tuple[int, ...]]:
        """Shapes of `parameters()`, used to detect stale tapes."""
        return [p.shape for p in self.parameters()]

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        """Copy values into the existing parameter arrays, in place."""
        params = self.parameters()
        if len(params) != len(arrays):
            raise ContractViolation("parameter count mismatch")
        for target, source in zip(params, arrays):
            if target.shape != np.shape(source):
                raise ContractViolation("parameter shape mismatch")
            target[...] = source

    def copy(self) -> "Mlp":
        """Deep copy."""
        return copy.deepcopy(self)


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    layer_norm: bool = False,
) -> Mlp:
    """
    Build an Mlp with uniform fan-in initialization (±1/sqrt(fan_in)).

    Args:
        sizes (Sequence[int]): Layer widths, input first and output last.
        rng (np.random.Generator): Source of the initial weights.
        hidden_activation (str, optional): Nonlinearity of hidden layers. Defaults to "relu".
        output_activation (str, optional): Nonlinearity of the last layer. Defaults to "identity".
        layer_norm (bool, optional): Normalize every hidden pre-activation. Defaults to False.

    Returns:
        Mlp: The freshly initialized network.
    """
    if len(sizes) < 2:
        raise ContractViolation("an Mlp needs an input and an output size")
    layers: List[Layer] = []
    for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound: float = 1.0 / math.sqrt(fan_in)
        hidden: bool = index < len(sizes) - 2
        layers.append(
            Layer(
                weight=rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                bias=rng.uniform(-bound, bound, size=fan_out),
                activation=hidden_activation if hidden else output_activation,
                gain=np.ones(fan_out) if hidden and layer_norm else None,
                shift=np.zeros(fan_out) if hidden and layer_norm else None,
            )
        )
    return Mlp(layers)


@dataclass
class LayerRecord:
    """What backward needs from one layer of a forward pass."""

    inputs: np.ndarray
    outputs: np.ndarray
    normalized: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None


@dataclass
class Tape:
    """Activation record of one forward pass."""

    records: List[LayerRecord]
    shapes: List[Tuple[int, ...]]
    vector_input: bool


@dataclass
class Gradients:
    """Parameter gradients of one network plus the gradient w.r.t. its input."""

    layers: List[List[np.ndarray]]
    inputs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def arrays(self) -> List[np.ndarray]:
        """Gradient arrays in the same order as `Mlp.parameters()`."""
        return [g for layer in self.layers for g in layer]

    @classmethod
    def zeros_like(cls, net: Mlp) -> "Gradients":
        """All-zero gradients shaped like `net`."""
        return cls([[np.zeros_like(p) for p in layer.parameters()] for layer in net.layers])

    def accumulate(self, other: "Gradients") -> None:
        """Add another gradient set in place."""
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += theirs


def _activate(name: str, values: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(values, 0.0)
    if name == "tanh":
        return np.tanh(values)
    return values


def forward(net: Mlp, inputs: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """
    Evaluate the network and record a tape for backward.

    Args:
        net (Mlp): The network.
        inputs (np.ndarray): One input vector or a (batch, in_dim) matrix.

    Returns:
        Tuple[np.ndarray, Tape]: The output (same rank as the input) and the tape.
    """
    values = np.asarray(inputs, dtype=np.float64)
    vector_input: bool = values.ndim == 1
    hidden = np.atleast_2d(values)
    if hidden.ndim != 2 or hidden.shape[1] != net.in_dim:
        raise ContractViolation(
            f"input dimension {hidden.shape[-1]} does not match network input {net.in_dim}"
        )
    records: List[LayerRecord] = []
    for layer in net.layers:
        pre = hidden @ layer.weight + layer.bias
        normalized = inv_std = None
        if layer.gain is not None and layer.shift is not None:
            centered = pre - pre.mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(centered.var(axis=1, keepdims=True) + LAYER_NORM_EPS)
            normalized = centered * inv_std
            pre = normalized * layer.gain + layer.shift
        out = _activate(layer.activation, pre)
        records.append(LayerRecord(hidden, out, normalized, inv_std))
        hidden = out
    tape = Tape(records, net.shapes(), vector_input)
    return (hidden[0] if vector_input else hidden), tape


def backward(net: Mlp, tape: Tape, output_gradient: np.ndarray) -> Gradients:
    """
    Backpropagate an output gradient through a recorded forward pass.

    Args:
        net (Mlp): The network the tape was recorded on.
        tape (Tape): Tape returned by `forward`.
        output_gradient (np.ndarray): d(loss)/d(output), shaped like the forward output.

    Returns:
        Gradients: d(loss)/d(parameter) summed over the batch, and d(loss)/d(input).
    """
    if net.shapes() != tape.shapes or len(tape.records) != len(net.layers):
        raise ContractViolation("stale tape: network parameters changed shape since forward")
    grad = np.atleast_2d(np.asarray(output_gradient, dtype=np.float64))
    if grad.shape != tape.records[-1].outputs.shape:
        raise ContractViolation("output gradient shape does not match the forward output")
    per_layer: List[List[np.ndarray]] = []
    for layer, record in zip(reversed(net.layers), reversed(tape.records)):
        if layer.activation == "relu":
            grad = grad * (record.outputs > 0.0)
        elif layer.activation == "tanh":
            grad = grad * (1.0 - record.outputs**2)
        norm_grads: List[np.ndarray] = []
        if layer.gain is not None and record.normalized is not None:
            norm_grads = [(grad * record.normalized).sum(axis=0), grad.sum(axis=0)]
            scaled = grad * layer.gain
            grad = record.inv_std * (
                scaled
                - scaled.mean(axis=1, keepdims=True)
                - record.normalized * (scaled * record.normalized).mean(axis=1, keepdims=True)
            )
        per_layer.append([record.inputs.T @ grad, grad.sum(axis=0)] + norm_grads)
        grad = grad @ layer.weight.T
    per_layer.reverse()
    return Gradients(per_layer, grad[0] if tape.vector_input else grad)


@dataclass
class AdamState:
    """Moment buffers and hyperparameters of one Adam optimizer."""

    first: List[np.ndarray]
    second: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: Sequence[np.ndarray], lr: float = 1e-3, **kwargs: float) -> "AdamState":
        """Zero-initialized state congruent with `arrays`."""
        return cls(
            first=[np.zeros_like(a) for a in arrays],
            second=[np.zeros_like(a) for a in arrays],
            lr=lr,
            **kwargs,
        )

    @classmethod
    def for_mlp(cls, net: Mlp, lr: float = 1e-3, **kwargs: float) -> "AdamState":
        """Zero-initialized state congruent with `net`."""
        return cls.for_arrays(net.parameters(), lr=lr, **kwargs)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """
    Apply one bias-corrected Adam step to `params` in place.

    Args:
        params (Sequence[np.ndarray]): Arrays to update.
        grads (Sequence[np.ndarray]): Gradients, congruent with `params`.
        state (AdamState): Optimizer state, congruent with `params`.
    """
    if not len(params) == len(grads) == len(state.first):
        raise ContractViolation("optimizer state, parameters and gradients disagree in count")
    state.step += 1
    correction1: float = 1.0 - state.beta1**state.step
    correction2: float = 1.0 - state.beta2**state.step
    for param, grad, first, second in zip(params, grads, state.first, state.second):
        if not param.shape == np.shape(grad) == first.shape:
            raise ContractViolation("optimizer state, parameters and gradients disagree in shape")
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * np.square(grad)
        param -= state.lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)


def adam_step(net: Mlp, grads: Gradients, state: AdamState) -> Tuple[Mlp, AdamState]:
    """
    Apply one Adam step to every parameter of `net`.

    Args:
        net (Mlp): Network to update in place.
        grads (Gradients): Gradients from `backward`.
        state (AdamState): The network's optimizer state.

    Returns:
        Tuple[Mlp, AdamState]: The updated network and optimizer state.
    """
    adam_update(net.parameters(), grads.arrays(), state)
    return net, state


@dataclass
class SquashedSample:
    """A reparameterized tanh-Gaussian draw and what its backward pass needs."""

    action: np.ndarray
    log_prob: np.ndarray
    squashed: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    in_range: np.ndarray


def tanh_gaussian_sample(mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray) -> SquashedSample:
    """
    Squash a reparameterized Gaussian draw through tanh.

    Args:
        mean (np.ndarray): Pre-squash mean, (action_dim,) or (batch, action_dim).
        log_std (np.ndarray): Pre-squash log standard deviation, clamped to [-10, 2].
        noise (np.ndarray): Standard normal noise of the same shape.

    Returns:
        SquashedSample: action = tanh(mean + exp(log_std) * noise) and its log density,
            including the tanh change-of-variables correction.
    """
    mean = np.asarray(mean, dtype=np.float64)
    raw_log_std = np.asarray(log_std, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    clamped = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(clamped)
    pre = mean + std * noise
    squashed = np.tanh(pre)
    # log(1 - tanh(x)^2) written without cancellation
    log_jacobian = 2.0 * (math.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))
    log_prob = np.sum(-0.5 * noise**2 - clamped - _HALF_LOG_TWO_PI - log_jacobian, axis=-1)
    return SquashedSample(
        action=np.clip(squashed, -_ACTION_LIMIT, _ACTION_LIMIT),
        log_prob=log_prob,
        squashed=squashed,
        std=std,
        noise=noise,
        in_range=(raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX),
    )


def tanh_gaussian_backward(
    sample: SquashedSample, grad_action: np.ndarray, grad_log_prob: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of a loss w.r.t. the head's mean and log_std inputs.

    Args:
        sample (SquashedSample): The draw being differentiated.
        grad_action (np.ndarray): d(loss)/d(action).
        grad_log_prob (np.ndarray): d(loss)/d(log_prob), one value per row.

    Returns:
        Tuple[np.ndarray, np.ndarray]: d(loss)/d(mean) and d(loss)/d(log_std).
    """
    glp = np.asarray(grad_log_prob, dtype=np.float64)[..., None]
    grad_pre = grad_action * (1.0 - sample.squashed**2) + glp * 2.0 * sample.squashed
    grad_log_std = (grad_pre * sample.std * sample.noise - glp) * sample.in_range
    return grad_pre, grad_log_std


def _describe(net: Mlp) -> List[Dict[str, Any]]:
    return [
        {
            "weight": list(layer.weight.shape),
            "bias": list(layer.bias.shape),
            "activation": layer.activation,
            "layer_norm": layer.layer_norm,
        }
        for layer in net.layers
    ]


def save_parameters(path: str, nets: Dict[str, Mlp], metadata: Optional[Dict[str, Any]] = None) -> None:
    """
    Write networks as a one-line JSON header followed by a little-endian float32 stream.

    Args:
        path (str): Destination file.
        nets (Dict[str, Mlp]): Networks by name; written in insertion order.
        metadata (Optional[Dict[str, Any]], optional): Extra JSON-serializable header data.
    """
    header: Dict[str, Any] = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "networks": [{"name": name, "layers": _describe(net)} for name, net in nets.items()],
        "metadata": metadata or {},
    }
    flat = [p.ravel() for net in nets.values() for p in net.parameters()]
    stream = np.concatenate(flat).astype("<f4") if flat else np.zeros(0, dtype="<f4")
    try:
        with open(path, "wb") as file:
            file.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            file.write(stream.tobytes())
        logger.debug("Saved %d networks to %s", len(nets), path)
    except (OSError, IOError) as e:
        logger.critical("Failed to write parameter checkpoint %s: %s", path, e)
        raise


def load_parameters(path: str) -> Tuple[Dict[str, Mlp], Dict[str, Any]]:
    """
    Read a checkpoint written by `save_parameters`.

    Args:
        path (str): Checkpoint file.

    Returns:
        Tuple[Dict[str, Mlp], Dict[str, Any]]: Networks by name and the header metadata.
    """
    with open(path, "rb") as file:
        blob: bytes = file.read()
    newline: int = blob.find(b"\n")
    if newline < 0:
        raise DatasetParseError("checkpoint header is not terminated", len(blob))
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetParseError(f"malformed checkpoint header ({e})", 0) from e
    if header.get("format") != _CHECKPOINT_FORMAT or header.get("version") != _CHECKPOINT_VERSION:
        raise DatasetParseError("not a version-1 wombet parameter checkpoint", 0)
    payload: bytes = blob[newline + 1 :]
    if len(payload) % 4:
        raise DatasetParseError("parameter stream is truncated mid-value", len(blob))
    stream = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    nets: Dict[str, Mlp] = {}
    cursor: int = 0

    def take(shape: Sequence[int]) -> np.ndarray:
        nonlocal cursor
        count = int(np.prod(shape))
        if cursor + count > stream.size:
            raise DatasetParseError("parameter stream is truncated", newline + 1 + 4 * stream.size)
        values = stream[cursor : cursor + count].reshape(shape).copy()
        cursor += count
        return values

    for entry in header["networks"]:
        layers: List[Layer] = []
        for shape in entry["layers"]:
            weight = take(shape["weight"])
            bias = take(shape["bias"])
            # gain and shift are as wide as the bias
            gain = take(shape["bias"]) if shape["layer_norm"] else None
            shift = take(shape["bias"]) if shape["layer_norm"] else None
            layers.append(Layer(weight, bias, shape["activation"], gain, shift))
        nets[entry["name"]] = Mlp(layers)
    if cursor != stream.size:
        raise DatasetParseError("trailing data after parameter stream", newline + 1 + 4 * cursor)
    return nets, header["metadata"]
