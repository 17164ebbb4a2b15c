"""Minimal dense feed-forward networks with exact reverse-mode gradients.

Layers form a directed acyclic graph: each layer reads either the network
input or the output of one earlier layer, so plain encoder/decoder stacks
and shared-encoder multi-head graphs are both expressible. All arithmetic
is float64. Analytic gradients are checked against the central
finite-difference oracle in :func:`fd_gradient`.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ConfigurationError, NumericsError

ACTIVATIONS = ("relu", "sigmoid", "identity")

ROLE_WEIGHT = "weight"
ROLE_BIAS = "bias"


@dataclass
class ParamTensor:
    """A named parameter array together with its current gradient."""

    name: str
    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.values.shape:
            raise ConfigurationError(
                f"{self.name}: grad shape {self.grad.shape} does not match "
                f"values shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def check_finite(self, context: str = "") -> None:
        suffix = f" {context}" if context else ""
        if not np.isfinite(self.values).all():
            raise NumericsError(f"non-finite values in {self.name}{suffix}")
        if not np.isfinite(self.grad).all():
            raise NumericsError(f"non-finite gradient in {self.name}{suffix}")

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.name, self.values.copy(), self.grad.copy())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "identity":
        return z
    raise ConfigurationError(f"unknown activation {kind!r}")


def activation_grad(kind: str, post: np.ndarray) -> np.ndarray:
    """Derivative w.r.t. the pre-activation, written in terms of the output.

    All three supported activations admit this form: relu's subgradient at
    exactly zero is taken as zero.
    """
    if kind == "relu":
        return (post > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return post * (1.0 - post)
    if kind == "identity":
        return np.ones_like(post)
    raise ConfigurationError(f"unknown activation {kind!r}")


@dataclass
class DenseLayer:
    """A fully connected layer: ``h = act(x @ W.T + b)`` with W of shape (out, in)."""

    weight: ParamTensor
    bias: ParamTensor
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.values.ndim != 2:
            raise ConfigurationError(f"{self.weight.name}: weight must be 2-D")
        if self.bias.values.ndim != 1 or self.bias.size != self.out_dim:
            raise ConfigurationError(
                f"{self.bias.name}: bias length {self.bias.size} does not match "
                f"weight rows {self.out_dim}")

    @property
    def out_dim(self) -> int:
        return self.weight.values.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.values.shape[1]

    @classmethod
    def seeded(cls, index: int, in_dim: int, out_dim: int, activation: str,
               rng: np.random.Generator) -> "DenseLayer":
        """Initialize weight and bias uniformly in +-1/sqrt(in_dim)."""
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"layer {index}: widths must be positive")
        bound = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(ParamTensor(f"layer{index}.weight", w),
                   ParamTensor(f"layer{index}.bias", b), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


class Network:
    """An ordered list of dense layers plus named component ranges.

    ``layer_inputs[k]`` is the index of the layer whose output feeds layer k,
    or -1 for the network input; omitted, it defaults to the sequential chain
    ``[-1, 0, 1, ...]``. ``components`` maps a component name to a half-open
    ``[start, end)`` layer range; the ranges must partition the layer list.
    Layers with no consumer are sinks; the network output is the
    concatenation of sink outputs in layer order.
    """

    def __init__(self, layers: Iterable[DenseLayer],
                 components: dict[str, tuple[int, int]],
                 layer_inputs: Iterable[int] | None = None) -> None:
        self.layers: list[DenseLayer] = list(layers)
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        n = len(self.layers)
        if layer_inputs is None:
            self.layer_inputs = list(range(-1, n - 1))
        else:
            self.layer_inputs = [int(s) for s in layer_inputs]
        self.components: dict[str, tuple[int, int]] = {
            str(name): (int(lo), int(hi)) for name, (lo, hi) in dict(components).items()}
        self._validate()
        consumers: list[list[int]] = [[] for _ in range(n)]
        for k, src in enumerate(self.layer_inputs):
            if src >= 0:
                consumers[src].append(k)
        self._consumers = tuple(tuple(c) for c in consumers)
        self._sinks = tuple(k for k in range(n) if not consumers[k])

    def _validate(self) -> None:
        n = len(self.layers)
        if len(self.layer_inputs) != n:
            raise ConfigurationError(
                f"layer_inputs has {len(self.layer_inputs)} entries for {n} layers")
        input_widths = set()
        for k, src in enumerate(self.layer_inputs):
            if not -1 <= src < k:
                raise ConfigurationError(
                    f"layer {k} reads from {src}; sources must be -1 or an earlier layer")
            if src == -1:
                input_widths.add(self.layers[k].in_dim)
            elif self.layers[k].in_dim != self.layers[src].out_dim:
                raise ConfigurationError(
                    f"layer {k} input width {self.layers[k].in_dim} does not match "
                    f"layer {src} output width {self.layers[src].out_dim}")
        if not input_widths:
            raise ConfigurationError("no layer reads the network input")
        if len(input_widths) > 1:
            raise ConfigurationError(
                f"layers reading the network input disagree on width: {sorted(input_widths)}")
        if not self.components:
            raise ConfigurationError("network needs at least one named component")
        covered: list[int] = []
        for name, (lo, hi) in self.components.items():
            if not (0 <= lo < hi <= n):
                raise ConfigurationError(
                    f"component {name!r} range [{lo}, {hi}) is invalid for {n} layers")
            covered.extend(range(lo, hi))
        if sorted(covered) != list(range(n)):
            raise ConfigurationError("component ranges must partition the layer list")

    # -- topology ---------------------------------------------------------

    def source(self, k: int) -> int:
        return self.layer_inputs[k]

    def consumers(self, k: int) -> tuple[int, ...]:
        return self._consumers[k]

    def sinks(self) -> tuple[int, ...]:
        return self._sinks

    def component_of(self, k: int) -> str:
        for name, (lo, hi) in self.components.items():
            if lo <= k < hi:
                return name
        raise ConfigurationError(f"layer {k} belongs to no component")

    @property
    def input_dim(self) -> int:
        for k, src in enumerate(self.layer_inputs):
            if src == -1:
                return self.layers[k].in_dim
        raise ConfigurationError("no layer reads the network input")

    @property
    def output_dim(self) -> int:
        return sum(self.layers[s].out_dim for s in self._sinks)

    # -- parameters -------------------------------------------------------

    def param_tensors(self) -> Iterator[tuple[int, str, ParamTensor]]:
        for k, layer in enumerate(self.layers):
            yield k, ROLE_WEIGHT, layer.weight
            yield k, ROLE_BIAS, layer.bias

    def param_count(self) -> int:
        return sum(t.size for _, _, t in self.param_tensors())

    def check_finite(self, context: str = "") -> None:
        for _, _, tensor in self.param_tensors():
            tensor.check_finite(context)

    def _flat_parts(self) -> list[tuple[int, ParamTensor]]:
        parts = []
        offset = 0
        for _, _, tensor in self.param_tensors():
            parts.append((offset, tensor))
            offset += tensor.size
        return parts

    def get_flat(self, index: int) -> float:
        offset, tensor = self._locate(index)
        return float(tensor.values.reshape(-1)[index - offset])

    def set_flat(self, index: int, value: float) -> None:
        offset, tensor = self._locate(index)
        tensor.values.reshape(-1)[index - offset] = value

    def _locate(self, index: int) -> tuple[int, ParamTensor]:
        if not 0 <= index < self.param_count():
            raise ConfigurationError(
                f"parameter index {index} out of range [0, {self.param_count()})")
        located = None
        for offset, tensor in self._flat_parts():
            if offset <= index < offset + tensor.size:
                located = (offset, tensor)
                break
        assert located is not None
        return located

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers],
                       dict(self.components), list(self.layer_inputs))


def build_sequential(widths: Iterable[int], activations: Iterable[str],
                     components: dict[str, tuple[int, int]],
                     seed: int | np.random.Generator = 0) -> Network:
    """Build a seeded sequential network from a width chain.

    ``widths = [d0, d1, ..., dL]`` yields L layers ``d(k) -> d(k+1)``.
    """
    widths = [int(w) for w in widths]
    activations = list(activations)
    if len(widths) < 2:
        raise ConfigurationError("need at least two widths for one layer")
    if len(activations) != len(widths) - 1:
        raise ConfigurationError(
            f"{len(widths) - 1} layers need {len(widths) - 1} activations, "
            f"got {len(activations)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = [DenseLayer.seeded(k, widths[k], widths[k + 1], activations[k], rng)
              for k in range(len(widths) - 1)]
    return Network(layers, components)


# -- forward / loss / backward -------------------------------------------


def forward(net: Network, batch: np.ndarray) -> list[np.ndarray]:
    """Run the network on a batch and return all activations.

    The returned list is ``[input, h_0, ..., h_(L-1), output]``: entry
    ``k + 1`` is the post-activation output of layer k and the final entry
    is the network output (the concatenation of sink outputs; for a plain
    chain it aliases the last layer's output). Pure: repeated calls on the
    same inputs return identical values.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ConfigurationError(f"batch must be 2-D, got shape {batch.shape}")
    if batch.shape[0] < 1:
        raise ConfigurationError("batch must contain at least one row")
    if batch.shape[1] != net.input_dim:
        raise ConfigurationError(
            f"batch width {batch.shape[1]} does not match network input width "
            f"{net.input_dim}")
    acts: list[np.ndarray] = [batch]
    for k, layer in enumerate(net.layers):
        x = acts[net.source(k) + 1]
        z = x @ layer.weight.values.T + layer.bias.values
        acts.append(apply_activation(layer.activation, z))
    sinks = net.sinks()
    if len(sinks) == 1:
        acts.append(acts[sinks[0] + 1])
    else:
        acts.append(np.concatenate([acts[s + 1] for s in sinks], axis=1))
    return acts


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean squared error and its gradient w.r.t. the prediction.

    The mean runs over every element, so magnitudes do not scale with batch
    size: ``loss = mean((pred - target)^2)``, ``grad = 2 (pred - target) / numel``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(
            f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def backward(net: Network, activations: list[np.ndarray],
             d_output: np.ndarray) -> None:
    """Fill every ParamTensor.grad via reverse-mode accumulation.

    ``activations`` must come from :func:`forward` on this network and
    ``d_output`` is the loss gradient w.r.t. the network output. Fan-out
    points (one layer feeding several consumers) accumulate the sum of the
    consumers' input gradients. Gradients are overwritten, not accumulated,
    across calls.
    """
    n = len(net.layers)
    if len(activations) != n + 2:
        raise ConfigurationError(
            f"expected {n + 2} cached activations, got {len(activations)}")
    d_output = np.asarray(d_output, dtype=np.float64)
    sinks = net.sinks()
    d_h: list[np.ndarray | None] = [None] * n
    col = 0
    for s in sinks:
        width = net.layers[s].out_dim
        d_h[s] = d_output[:, col:col + width]
        col += width
    if col != d_output.shape[1]:
        raise ConfigurationError(
            f"d_output width {d_output.shape[1]} does not match network output "
            f"width {col}")
    for k in reversed(range(n)):
        dh = d_h[k]
        assert dh is not None  # every non-sink layer feeds a later layer
        layer = net.layers[k]
        h = activations[k + 1]
        if layer.activation == "identity":
            dz = dh
        else:
            dz = dh * activation_grad(layer.activation, h)
        x = activations[net.source(k) + 1]
        layer.weight.grad = dz.T @ x
        layer.bias.grad = dz.sum(axis=0)
        src = net.source(k)
        if src >= 0:
            d_in = dz @ layer.weight.values
            d_h[src] = d_in if d_h[src] is None else d_h[src] + d_in
    for _, _, tensor in net.param_tensors():
        if not np.isfinite(tensor.grad).all():
            raise NumericsError(f"non-finite gradient in {tensor.name} after backward")


def fd_gradient(net: Network, batch: np.ndarray, target: np.ndarray,
                index: int, h: float = 1e-5,
                penalty: Callable[[Network], float] | None = None) -> float:
    """Central finite-difference derivative of the loss w.r.t. one parameter.

    ``penalty``, when given, is added to the task loss at both probe points
    (used to check composite objectives such as task + L1). The network is
    restored exactly afterwards.
    """
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")

    def total() -> float:
        acts = forward(net, batch)
        loss, _ = mse_loss(acts[-1], target)
        if penalty is not None:
            loss += float(penalty(net))
        return loss

    original = net.get_flat(index)
    try:
        net.set_flat(index, original + h)
        upper = total()
        net.set_flat(index, original - h)
        lower = total()
    finally:
        net.set_flat(index, original)
    return (upper - lower) / (2.0 * h)


def add_l1_subgradient(params: Iterable[ParamTensor], coeff: float) -> None:
    """Add ``coeff * sign(theta)`` to each tensor's gradient in place.

    ``coeff`` is the full effective coefficient (schedule value times any
    global loss weight). The subgradient at exactly zero is zero.
    """
    coeff = float(coeff)
    if coeff == 0.0:
        return
    for tensor in params:
        tensor.grad += coeff * np.sign(tensor.values)


# -- optimizers ----------------------------------------------------------


class SGD:
    """Plain gradient descent: ``theta -= lr * grad``."""

    def __init__(self, lr: float = 1e-3) -> None:
        if not lr > 0:
            raise ConfigurationError("learning rate must be positive")
        self.lr = float(lr)

    def step(self, net: Network) -> None:
        for _, _, tensor in net.param_tensors():
            tensor.values -= self.lr * tensor.grad
        net.check_finite("after SGD step")


class Adam:
    """Adam with bias correction; first and second moments are kept per tensor."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        if not lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        if not eps > 0:
            raise ConfigurationError("eps must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, net: Network) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for _, _, tensor in net.param_tensors():
            m = self._m.get(tensor.name)
            v = self._v.get(tensor.name)
            if m is None or m.shape != tensor.shape:
                m = np.zeros_like(tensor.values)
                v = np.zeros_like(tensor.values)
            m = self.beta1 * m + (1.0 - self.beta1) * tensor.grad
            v = self.beta2 * v + (1.0 - self.beta2) * tensor.grad * tensor.grad
            self._m[tensor.name] = m
            self._v[tensor.name] = v
            tensor.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        net.check_finite("after Adam step")


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_FORMAT = "prunescope.checkpoint"
CHECKPOINT_VERSION = 1


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    expected = 8 * int(np.prod(shape)) if shape else 8
    if len(raw) != expected:
        raise ConfigurationError(
            f"checkpoint array payload has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(net: Network, path: str | Path,
                    meta: dict | None = None) -> None:
    """Write the network to a JSON checkpoint (bitwise round trip via base64)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": [
            {
                "activation": layer.activation,
                "out": layer.out_dim,
                "in": layer.in_dim,
                "input": net.source(k),
                "weight": _encode_array(layer.weight.values),
                "bias": _encode_array(layer.bias.values),
            }
            for k, layer in enumerate(net.layers)
        ],
        "components": [[name, lo, hi] for name, (lo, hi) in net.components.items()],
        "meta": dict(meta or {}),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns the reconstructed network and the stored metadata dict.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a network checkpoint")
    layers = []
    layer_inputs = []
    for k, entry in enumerate(doc["layers"]):
        shape = (int(entry["out"]), int(entry["in"]))
        weight = _decode_array(entry["weight"], shape)
        bias = _decode_array(entry["bias"], (shape[0],))
        layers.append(DenseLayer(ParamTensor(f"layer{k}.weight", weight),
                                 ParamTensor(f"layer{k}.bias", bias),
                                 entry["activation"]))
        layer_inputs.append(int(entry.get("input", k - 1)))
    components = {name: (int(lo), int(hi)) for name, lo, hi in doc["components"]}
    net = Network(layers, components, layer_inputs)
    return net, dict(doc.get("meta", {}))
