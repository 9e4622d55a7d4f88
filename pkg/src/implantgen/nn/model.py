"""Encoder-decoder networks built from a plain layer ladder."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers

CONV = "conv3d_stride1"
DOWN = "conv3d_stride2"
UP = "deconv3d_stride2"
ACT = "activation"
_WEIGHTED = (CONV, DOWN, UP)

CHECKPOINT_MAGIC = b"IGNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 3
    in_channels: int = 1
    out_channels: int = 1
    fn: str = "relu"  # only read for activation layers

    def __post_init__(self):
        if self.kind not in _WEIGHTED + (ACT,):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kind == ACT:
            if self.fn not in ("relu", "sigmoid"):
                raise ValueError(f"unknown activation {self.fn!r}")
            if self.in_channels != self.out_channels:
                raise ValueError("activations cannot change the channel count")
        elif self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")

    @property
    def weighted(self) -> bool:
        return self.kind in _WEIGHTED


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[LayerSpec, ...]
    input_dims: tuple[int, int, int] | None = None
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dims is not None:
            object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.output_activation != "sigmoid":
            raise ValueError("only a sigmoid output is supported")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(f"channel chain broken between {prev} and {nxt}")
        downs = sum(l.kind == DOWN for l in self.layers)
        ups = sum(l.kind == UP for l in self.layers)
        if downs != ups:
            raise ValueError(f"{downs} stride-2 convolutions but {ups} deconvolutions")
        # every level of the encoder must halve exactly, or the decoder
        # cannot return to the input size
        depth = 0
        for l in self.layers:
            if l.kind == DOWN and self.input_dims is not None:
                depth += 1
                if any(d % 2 ** depth for d in self.input_dims):
                    raise ValueError(f"input dims {self.input_dims} not divisible by {2 ** depth}")

    def to_json(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_dims": None if self.input_dims is None else list(self.input_dims),
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_json(cls, obj: dict) -> NetworkConfig:
        dims = obj.get("input_dims")
        return cls(tuple(LayerSpec(**l) for l in obj["layers"]),
                   None if dims is None else tuple(dims), obj.get("output_activation", "sigmoid"))


def encoder_decoder(input_dims, channels, kernel: int, in_conv: bool = True
                    ) -> NetworkConfig:
    """Build a symmetric ladder.

    ``channels[0]`` is the width of the full-resolution stem; each further
    entry adds one stride-2 level going down and a matching deconvolution
    coming back up.  A final stride-1 convolution maps to one channel.
    """
    ls: list[LayerSpec] = []
    c_prev = 1
    if in_conv:
        ls += [LayerSpec(CONV, kernel, 1, channels[0]), LayerSpec(ACT, 0, channels[0], channels[0])]
        c_prev = channels[0]
    for c in channels[1:]:
        ls += [LayerSpec(DOWN, kernel, c_prev, c), LayerSpec(ACT, 0, c, c)]
        c_prev = c
    for c in reversed(channels[:-1]):
        ls += [LayerSpec(UP, kernel, c_prev, c), LayerSpec(ACT, 0, c, c)]
        c_prev = c
    ls.append(LayerSpec(CONV, kernel, c_prev, 1))
    return NetworkConfig(tuple(ls), tuple(input_dims))


def param_count(config: NetworkConfig) -> int:
    return sum(l.kernel ** 3 * l.in_channels * l.out_channels + l.out_channels
               for l in config.layers if l.weighted)


@dataclass(eq=False)
class Model:
    config: NetworkConfig
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: NetworkConfig, seed: int = 0) -> Model:
        """Uniform fan-in initialisation, ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for l in config.layers:
            if not l.weighted:
                ws.append(None)
                bs.append(None)
                continue
            shape = (l.out_channels, l.in_channels) + (l.kernel,) * 3
            fan_in = l.in_channels * l.kernel ** 3
            if l.kind == UP:
                # a stride-2 deconvolution sees about 1/8 of its taps per output voxel
                fan_in = max(1, fan_in // 8)
            bound = np.sqrt(6.0 / fan_in)
            ws.append(rng.uniform(-bound, bound, size=shape))
            bs.append(np.zeros(l.out_channels))
        return cls(config, ws, bs, seed)

    @classmethod
    def zeros(cls, config: NetworkConfig) -> Model:
        m = cls.init(config)
        m.weights = [None if w is None else np.zeros_like(w) for w in m.weights]
        return m

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out += [w, b]
        return out

    def copy(self, dtype=None) -> Model:
        def dup(a):
            return None if a is None else np.array(a, dtype=dtype or a.dtype)
        return Model(self.config, [dup(w) for w in self.weights],
                     [dup(b) for b in self.biases], self.seed, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        mine, theirs = self.parameters(), other.parameters()
        return (self.config == other.config and self.seed == other.seed
                and len(mine) == len(theirs)
                and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)))


def _check_input(model: Model, x: np.ndarray):
    if x.ndim == 3:
        x = x[None]
    first = next((l.in_channels for l in model.config.layers), 1)
    if x.shape[0] != first or x.shape[1:] != model.config.input_dims:
        raise ValueError(f"model expects input ({first}, {model.config.input_dims}), "
                         f"got {x.shape}")
    return x


def forward(model: Model, x: np.ndarray, keep: bool = False):
    """Run the ladder and the output sigmoid.

    ``x`` is ``(1, X, Y, Z)`` or ``(X, Y, Z)``; arithmetic happens in the dtype
    of the model's weights.  With ``keep=True`` the per-layer inputs (and the
    column matrices of convolutions) are returned too, for ``backward``.
    """
    dtype = next((w.dtype for w in model.weights if w is not None), np.float64)
    h = _check_input(model, x).astype(dtype, copy=False)
    cache = []
    for spec, w, b in zip(model.config.layers, model.weights, model.biases):
        cols = None
        if spec.kind in (CONV, DOWN):
            stride = 1 if spec.kind == CONV else 2
            cols = layers.conv3d_columns(h, spec.kernel, stride)
            nxt = layers.conv3d_forward(h, w, b, stride=stride, cols=cols)
        elif spec.kind == UP:
            nxt = layers.deconv3d_forward(h, w, b)
        elif spec.fn == "relu":
            nxt = layers.relu(h)
        else:
            nxt = layers.sigmoid(h)
        if keep:
            cache.append((h, cols))
        h = nxt
    y = layers.sigmoid(h)
    if keep:
        return y, cache
    return y


def backward(model: Model, cache, y: np.ndarray, grad_y: np.ndarray):
    """Gradients of a scalar loss wrt every weight and bias.

    ``grad_y`` is dL/d(output probabilities).  Returns lists aligned with
    ``model.weights`` and ``model.biases`` (``None`` for activation layers).
    """
    g = layers.sigmoid_backward(y, grad_y)
    gws: list = [None] * len(model.config.layers)
    gbs: list = [None] * len(model.config.layers)
    for i in range(len(model.config.layers) - 1, -1, -1):
        spec, (h, cols) = model.config.layers[i], cache[i]
        w = model.weights[i]
        if spec.kind in (CONV, DOWN):
            stride = 1 if spec.kind == CONV else 2
            g, gws[i], gbs[i] = layers.conv3d_backward(h, w, g, stride=stride, cols=cols)
        elif spec.kind == UP:
            g, gws[i], gbs[i] = layers.deconv3d_backward(h, w, g)
        elif spec.fn == "relu":
            g = layers.relu_backward(h, g)
        else:
            g = layers.sigmoid_backward(layers.sigmoid(h), g)
    return gws, gbs


def predict(model: Model, volume: np.ndarray) -> np.ndarray:
    """Probability volume ``(X, Y, Z)`` for a single-channel input volume."""
    return forward(model, volume)[0].astype(np.float64)


def save_bytes(model: Model) -> bytes:
    """Checkpoint: magic, version, JSON header length, JSON header, raw <f8 arrays."""
    arrays = model.parameters()
    header = json.dumps({
        "config": model.config.to_json(),
        "seed": model.seed,
        "meta": model.meta,
        "arrays": [list(a.shape) for a in arrays],
        "dtype": np.dtype(arrays[0].dtype).name if arrays else "float64",
    }, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return (CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(header))
            + header + body)


def load_bytes(blob: bytes) -> Model:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<HI", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    config = NetworkConfig.from_json(header["config"])
    arrays = []
    for shape in header["arrays"]:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
                      .reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(blob):
        raise ValueError("checkpoint length does not match its header")
    model = Model.zeros(config)
    it = iter(arrays)
    for i, w in enumerate(model.weights):
        if w is not None:
            model.weights[i] = next(it)
            model.biases[i] = next(it)
    model = model.copy(np.dtype(header.get("dtype", "float64")))
    model.seed = header["seed"]
    model.meta = header.get("meta", {})
    return model


def save(path: str | os.PathLike, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(save_bytes(model))


def load(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
