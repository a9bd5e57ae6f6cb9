"""Dense generator and critic networks.

Checkpoint layout (little-endian)::

    b"GANP" | u32 version=1 | u8 role | u32 layer_count
    layer_count x { u32 in_dim | u32 out_dim | u8 activation_code }
    layer_count x { f64 weight[in_dim, out_dim] row-major | f64 bias[out_dim] }
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, FormatError

MAGIC = b"GANP"
VERSION = 1

ACTIVATIONS = ("linear", "relu", "leaky_relu", "tanh", "sigmoid")
ROLES = ("generator", "critic")

_ACT_FN = {
    "linear": lambda x: x,
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class MlpNet:
    layers: list
    weights: list  # [(W (in, out), b (out,)), ...]
    role: str = "generator"
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def n_params(self):
        return int(np.sum([w.size + b.size for w, b in self.weights]))

    def flat_params(self):
        return [a for pair in self.weights for a in pair]

    def set_flat_params(self, arrays):
        arrays = list(arrays)
        self.weights = [
            (np.array(arrays[2 * i], dtype=np.float64), np.array(arrays[2 * i + 1], dtype=np.float64))
            for i in range(len(self.layers))
        ]

    def copy(self):
        return MlpNet(
            list(self.layers),
            [(w.copy(), b.copy()) for w, b in self.weights],
            self.role,
            dict(self.meta),
        )

    def __call__(self, x):
        return apply(self, x)


def check_spec(spec):
    if not spec:
        raise ConfigError("network spec must contain at least one layer")
    for prev, nxt in zip(spec, spec[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ConfigError(
                f"incompatible adjacent layers: {prev.out_dim} outputs feed {nxt.in_dim} inputs"
            )


def mlp_spec(sizes, hidden_activation="leaky_relu", output_activation="linear"):
    """Layer list for ``sizes = [in, h1, ..., out]``."""
    if len(sizes) < 2:
        raise ConfigError("need at least input and output sizes")
    n = len(sizes) - 1
    return [
        LayerSpec(sizes[i], sizes[i + 1], output_activation if i == n - 1 else hidden_activation)
        for i in range(n)
    ]


def generator_spec(latent_dim, data_dim, hidden=(256, 256)):
    return mlp_spec([latent_dim, *hidden, data_dim], output_activation="tanh")


def critic_spec(data_dim, hidden=(256, 256)):
    return mlp_spec([data_dim, *hidden, 1], output_activation="linear")


def init(spec, seed, role="generator"):
    """He-style fan-in uniform weights, zero biases; deterministic in ``seed``."""
    spec = list(spec)
    check_spec(spec)
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}")
    if role == "critic" and (spec[-1].out_dim != 1 or spec[-1].activation != "linear"):
        raise ConfigError("a critic must end in a single linear output")
    rng = np.random.default_rng(seed)
    weights = []
    for layer in spec:
        limit = np.sqrt(6.0 / layer.in_dim)
        w = rng.uniform(-limit, limit, size=(layer.in_dim, layer.out_dim))
        weights.append((w, np.zeros(layer.out_dim)))
    return MlpNet(spec, weights, role)


def bind(net, tape):
    """Place the weights on ``tape`` as leaves; returns ``[(W, b), ...]`` nodes."""
    return [(tape.leaf(w, "weight"), tape.leaf(b, "bias")) for w, b in net.weights]


def apply(net, x, tape=None, params=None):
    """Run ``x`` (one sample or a batch of rows) through the network.

    Plain arrays with no ``tape`` give a plain array.  With a ``tape`` the
    input becomes a leaf on it; ``params`` (from :func:`bind`) makes the
    weights differentiable too.  Node and :class:`~ganprior.autodiff.Dual`
    inputs propagate as such.
    """
    n_in = ad.value_of(x).shape[-1] if ad.value_of(x).ndim else 0
    if n_in != net.input_dim:
        raise ContractError(f"input length {n_in} != network input dim {net.input_dim}")
    if tape is not None and not isinstance(x, (ad.Node, ad.Dual)):
        x = tape.leaf(x, "input")
    weights = net.weights if params is None else params
    h = x
    for layer, (w, b) in zip(net.layers, weights):
        h = _ACT_FN[layer.activation](ad.dense(h, w, b))
    return h


def save(net, path):
    act_codes = {name: i for i, name in enumerate(ACTIVATIONS)}
    parts = [MAGIC, struct.pack("<IBI", VERSION, ROLES.index(net.role), len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, act_codes[layer.activation]))
    for w, b in net.weights:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load(path):
    data = Path(path).read_bytes()
    return loads(data)


def loads(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, expected b'GANP'", offset=0)
    offset = 4
    header = struct.Struct("<IBI")
    if len(data) < offset + header.size:
        raise FormatError("truncated header", offset=offset)
    version, role_code, n_layers = header.unpack_from(data, offset)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=offset)
    if role_code >= len(ROLES):
        raise FormatError(f"unknown role code {role_code}", offset=offset + 4)
    offset += header.size
    layer_struct = struct.Struct("<IIB")
    layers = []
    for i in range(n_layers):
        if len(data) < offset + layer_struct.size:
            raise FormatError(f"truncated layer table at layer {i}", offset=offset)
        n_in, n_out, code = layer_struct.unpack_from(data, offset)
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}", offset=offset + 8)
        try:
            layers.append(LayerSpec(n_in, n_out, ACTIVATIONS[code]))
        except ConfigError as exc:
            raise FormatError(str(exc), offset=offset) from exc
        offset += layer_struct.size
    try:
        check_spec(layers)
    except ConfigError as exc:
        raise FormatError(str(exc), offset=offset) from exc
    weights = []
    for i, layer in enumerate(layers):
        n_w, n_b = layer.in_dim * layer.out_dim, layer.out_dim
        need = 8 * (n_w + n_b)
        if len(data) < offset + need:
            raise FormatError(f"payload truncated in layer {i}", offset=len(data))
        w = np.frombuffer(data, "<f8", n_w, offset).reshape(layer.in_dim, layer.out_dim)
        b = np.frombuffer(data, "<f8", n_b, offset + 8 * n_w)
        weights.append((w.astype(np.float64), b.astype(np.float64)))
        offset += need
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after payload", offset=offset)
    return MlpNet(layers, weights, ROLES[role_code])
