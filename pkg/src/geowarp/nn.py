"""Minimal dense-network engine sized for tiny MLPs.

Provides the :class:`MlpNetwork` container (per-layer weights, biases and an
activation tag), exact reverse-mode gradients through a recorded
:class:`GradientTape`, closed-form input Jacobians, a bias-corrected Adam
optimizer, and bitwise-reproducible float64 checkpoints.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from hashlib import sha256
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ACTIVATIONS",
    "DenseLayer",
    "MlpNetwork",
    "GradientTape",
    "AdamState",
    "NonFiniteGradientError",
    "forward",
    "backward",
    "input_jacobian",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_digest",
]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class Activation:
    name: str
    value: Callable
    prime: Callable
    second: Callable


ACTIVATIONS: dict[str, Activation] = {
    "ELU": Activation(
        "ELU",
        lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))),
        lambda x: np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))),
        lambda x: np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0))),
    ),
    "ReLU": Activation(
        "ReLU",
        lambda x: np.where(x > 0, x, 0.0),
        lambda x: (x > 0).astype(np.float64),
        lambda x: np.zeros_like(x),
    ),
    "Softplus": Activation(
        "Softplus",
        lambda x: np.logaddexp(0.0, x),
        _sigmoid,
        lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
    ),
    "Tanh": Activation(
        "Tanh",
        np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
    ),
    "Identity": Activation(
        "Identity",
        lambda x: x,
        lambda x: np.ones_like(x),
        lambda x: np.zeros_like(x),
    ),
}


def _act(a: Tensor, name: str) -> Tensor:
    if name == "Identity":
        return a
    act = ACTIVATIONS[name]
    return ad.elementwise(a, act.value, act.prime)


def _act_prime(a: Tensor, name: str) -> Tensor:
    act = ACTIVATIONS[name]
    return ad.elementwise(a, act.prime, act.second)


@dataclass
class DenseLayer:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class MlpNetwork:
    """Feed-forward network: x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation tag {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ValueError(f"layer {k}: bias shape {layer.bias.shape} mismatch")
            if not (np.isfinite(layer.weight.data).all() and np.isfinite(layer.bias.data).all()):
                raise ValueError(f"layer {k}: non-finite parameters")
            if k > 0 and layers[k - 1].out_dim != layer.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: layer {k-1} outputs "
                    f"{layers[k-1].out_dim}, layer {k} expects {layer.in_dim}"
                )
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def from_sizes(cls, sizes, activations, rng: np.random.Generator) -> "MlpNetwork":
        """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(
                DenseLayer(ad.parameter(w), ad.parameter(np.zeros(fan_out)), act)
            )
        return cls(layers)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}layers.{k}.weight"] = layer.weight
            out[f"{prefix}layers.{k}.bias"] = layer.bias
        return out

    # Forward paths --------------------------------------------------------
    def apply(self, x: Tensor, dropout_rate: float = 0.0, dropout_rng=None) -> Tensor:
        """Taped forward. Dropout (inverted) is applied after every hidden
        activation when a rate and rng are given; never on the final layer."""
        squeeze = x.ndim == 1
        h = ad.reshape(x, (1, -1)) if squeeze else x
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            a = h @ ad.swapaxes(layer.weight, -1, -2) + layer.bias
            h = _act(a, layer.activation)
            if dropout_rate > 0.0 and k < last:
                if dropout_rng is None:
                    raise ValueError("dropout requires an rng")
                mask = (
                    dropout_rng.random(h.shape) >= dropout_rate
                ).astype(np.float64) / (1.0 - dropout_rate)
                h = h * ad.constant(mask)
        return ad.reshape(h, (self.out_dim,)) if squeeze else h

    def value(self, x: np.ndarray) -> np.ndarray:
        """Plain forward without a tape; accepts (in,) or (N, in)."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            a = h @ layer.weight.data.T + layer.bias.data
            h = ACTIVATIONS[layer.activation].value(a)
        return h

    def jacobian_batch(self, Z: np.ndarray) -> np.ndarray:
        """d output / d input at each row of Z, shape (N, out, in)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.in_dim:
            raise ValueError(
                f"input dimension {Z.shape[1]} does not match network input {self.in_dim}"
            )
        h = Z
        J = None
        for layer in self.layers:
            a = h @ layer.weight.data.T + layer.bias.data
            act = ACTIVATIONS[layer.activation]
            wj = layer.weight.data if J is None else layer.weight.data @ J
            J = act.prime(a)[:, :, None] * wj
            h = act.value(a)
        return J

    def jacobian_on_tape(self, Z: np.ndarray) -> Tensor:
        """Like :meth:`jacobian_batch` but as a graph node, so gradients with
        respect to the parameters can flow through the Jacobian entries."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        h: Tensor = ad.constant(Z)
        J: Tensor | None = None
        for layer in self.layers:
            a = h @ ad.swapaxes(layer.weight, -1, -2) + layer.bias
            d = _act_prime(a, layer.activation)  # (N, out)
            wj = layer.weight if J is None else ad.matmul(layer.weight, J)
            J = ad.reshape(d, d.shape + (1,)) * wj
            h = _act(a, layer.activation)
        return J

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            [
                DenseLayer(
                    ad.parameter(l.weight.data.copy()),
                    ad.parameter(l.bias.data.copy()),
                    l.activation,
                )
                for l in self.layers
            ]
        )

    def architecture(self) -> dict:
        return {
            "sizes": [self.in_dim] + [l.out_dim for l in self.layers],
            "activations": [l.activation for l in self.layers],
        }


class GradientTape:
    """Recorded forward pass; evaluates parameter and input gradients without
    mutating the network."""

    def __init__(self, net: MlpNetwork, x: Tensor, y: Tensor):
        self.net = net
        self.x = x
        self.y = y

    def _run(self, upstream: np.ndarray) -> None:
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.y.shape:
            raise ValueError(
                f"upstream shape {upstream.shape} does not match output {self.y.shape}"
            )
        params = list(self.net.parameters().values()) + [self.x]
        ad.zero_grad(params)
        ad.backward(self.y, upstream)

    def parameter_gradients(self, upstream) -> dict[str, np.ndarray]:
        self._run(upstream)
        out = {}
        for name, t in self.net.parameters().items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            t.grad = None
        self.x.grad = None
        return out

    def input_gradient(self, upstream) -> np.ndarray:
        self._run(upstream)
        g = np.zeros_like(self.x.data) if self.x.grad is None else self.x.grad.copy()
        ad.zero_grad(list(self.net.parameters().values()) + [self.x])
        return g


def forward(net: MlpNetwork, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    """Evaluate the network and record a tape for exact reverse-mode grads."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ValueError(
            f"input dimension {x.shape[-1]} does not match network input {net.in_dim}"
        )
    xt = Tensor(x, requires_grad=True)
    y = net.apply(xt)
    return y.data.copy(), GradientTape(net, xt, y)


def backward(tape: GradientTape, upstream, net: MlpNetwork | None = None):
    """Gradients of upstream . y with respect to every parameter."""
    if net is not None and net is not tape.net:
        raise ValueError("tape was recorded for a different network")
    return tape.parameter_gradients(upstream)


def input_jacobian(net: MlpNetwork, x: np.ndarray) -> np.ndarray:
    """d y / d x as a (out, in) matrix, evaluated in closed form."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("input_jacobian expects a single input vector")
    return net.jacobian_batch(x[None, :])[0]


# Adam -----------------------------------------------------------------------

class NonFiniteGradientError(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.parameter = name


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], learning_rate: float, **kw) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState
) -> AdamState:
    """One bias-corrected Adam update, applied in place. Rejects the whole
    step (no mutation) if any gradient is non-finite."""
    for name in params:
        g = grads[name]
        if g.shape != params[name].data.shape:
            raise ValueError(f"gradient shape mismatch for parameter {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# Checkpoints ----------------------------------------------------------------

_CHECKPOINT_FORMAT = "geowarp-checkpoint-1"


def save_checkpoint(
    path,
    networks: dict[str, MlpNetwork],
    seed: int,
    step: int,
    extra: dict | None = None,
) -> None:
    """Write a self-describing npz (deterministic bytes, np.load compatible)."""
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "seed": int(seed),
        "step": int(step),
        "networks": {name: net.architecture() for name, net in networks.items()},
        "extra": extra or {},
    }
    arrays: dict[str, np.ndarray] = {}
    for name, net in networks.items():
        for k, layer in enumerate(net.layers):
            arrays[f"{name}/{k}/weight"] = np.ascontiguousarray(layer.weight.data)
            arrays[f"{name}/{k}/bias"] = np.ascontiguousarray(layer.bias.data)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def write(name: str, payload: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)

        write("meta.json", json.dumps(meta, sort_keys=True).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[name], allow_pickle=False)
            write(name + ".npy", buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, MlpNetwork], dict]:
    """Rebuild networks from a checkpoint; returns (networks, meta)."""
    files: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as z:
        meta = json.loads(z.read("meta.json").decode())
        for name in z.namelist():
            if name.endswith(".npy"):
                files[name[:-4]] = np.lib.format.read_array(
                    io.BytesIO(z.read(name)), allow_pickle=False
                )
    if meta.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    networks = {}
    for name, arch in meta["networks"].items():
        layers = []
        for k, act in enumerate(arch["activations"]):
            layers.append(
                DenseLayer(
                    ad.parameter(files[f"{name}/{k}/weight"]),
                    ad.parameter(files[f"{name}/{k}/bias"]),
                    act,
                )
            )
        networks[name] = MlpNetwork(layers)
    return networks, meta


def parameter_digest(params: dict[str, Tensor]) -> str:
    """sha256 over parameter bytes in name order; detects any drift."""
    h = sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
