"""Layer-stack autoencoder with exact backpropagation.

Architectures are plain lists of layer specs. The JSON config schema is::

    {"latent_index": 8,
     "layers": [{"type": "conv", "in_ch": 2, "out_ch": 16, "kernel": 5},
                {"type": "relu"},
                {"type": "maxpool", "window": 2},
                {"type": "upsample", "factor": 2},
                {"type": "transconv", "in_ch": 32, "out_ch": 16, "kernel": 5},
                {"type": "identity"}, ...]}

``latent_index`` is the number of leading layers forming the encoder; the
activation after them is the bottleneck.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IndivisibleLength, NumericalFault, ShapeMismatch
from ..rng import Pcg32
from . import layers as L

N_CHANNELS = 2
N_POINTS = 112


@dataclass(frozen=True)
class Conv1D:
    in_ch: int
    out_ch: int
    kernel: int
    type = "conv"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch, self.kernel)


@dataclass(frozen=True)
class TransConv1D:
    in_ch: int
    out_ch: int
    kernel: int
    type = "transconv"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")

    @property
    def weight_shape(self):
        # stored as the kernel of the adjoint convolution
        return (self.in_ch, self.out_ch, self.kernel)


@dataclass(frozen=True)
class MaxPool1D:
    window: int = 2
    type = "maxpool"

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("pool window must be >= 2")


@dataclass(frozen=True)
class Upsample1D:
    factor: int = 2
    type = "upsample"

    def __post_init__(self):
        if self.factor < 2:
            raise ValueError("upsample factor must be >= 2")


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")

    @property
    def type(self):
        return self.kind


LayerSpec = Conv1D | TransConv1D | MaxPool1D | Upsample1D | Activation
PARAM_LAYERS = (Conv1D, TransConv1D)


def layer_to_dict(spec: LayerSpec) -> dict:
    if isinstance(spec, PARAM_LAYERS):
        return {"type": spec.type, "in_ch": spec.in_ch, "out_ch": spec.out_ch, "kernel": spec.kernel}
    if isinstance(spec, MaxPool1D):
        return {"type": "maxpool", "window": spec.window}
    if isinstance(spec, Upsample1D):
        return {"type": "upsample", "factor": spec.factor}
    return {"type": spec.kind}


def layer_from_dict(d: dict) -> LayerSpec:
    t = d["type"]
    if t == "conv":
        return Conv1D(int(d["in_ch"]), int(d["out_ch"]), int(d["kernel"]))
    if t == "transconv":
        return TransConv1D(int(d["in_ch"]), int(d["out_ch"]), int(d["kernel"]))
    if t == "maxpool":
        return MaxPool1D(int(d.get("window", 2)))
    if t == "upsample":
        return Upsample1D(int(d.get("factor", 2)))
    if t in ("relu", "identity"):
        return Activation(t)
    raise ValueError(f"unknown layer type {t!r}")


def default_architecture() -> tuple[list[LayerSpec], int]:
    relu = Activation("relu")
    specs = [
        Conv1D(2, 16, 5), relu, MaxPool1D(2),
        Conv1D(16, 32, 5), relu, MaxPool1D(2),
        Conv1D(32, 4, 3), relu,
        # decoder
        Conv1D(4, 32, 3), relu, Upsample1D(2),
        TransConv1D(32, 16, 5), relu, Upsample1D(2),
        TransConv1D(16, 2, 5), Activation("identity"),
    ]
    return specs, 8


def load_architecture(path) -> tuple[list[LayerSpec], int]:
    cfg = json.loads(Path(path).read_text())
    if "architecture" in cfg:
        cfg = cfg["architecture"]
    return [layer_from_dict(d) for d in cfg["layers"]], int(cfg["latent_index"])


def architecture_to_dict(specs, latent_index) -> dict:
    return {"latent_index": latent_index, "layers": [layer_to_dict(s) for s in specs]}


def output_shape(specs, channels: int, length: int) -> tuple[int, int]:
    for s in specs:
        if isinstance(s, PARAM_LAYERS):
            if s.in_ch != channels:
                raise ShapeMismatch(f"{s} expects {s.in_ch} channels, got {channels}")
            channels = s.out_ch
        elif isinstance(s, MaxPool1D):
            if length % s.window:
                raise IndivisibleLength(f"length {length} not divisible by pool window {s.window}")
            length //= s.window
        elif isinstance(s, Upsample1D):
            length *= s.factor
    return channels, length


@dataclass
class AutoencoderModel:
    specs: list
    latent_index: int
    params: list = field(default_factory=list)  # [(w, b), ...] per conv-type layer, in order
    n_points: int = N_POINTS

    def __post_init__(self):
        if not 0 < self.latent_index < len(self.specs):
            raise ValueError("latent_index must split the stack into encoder and decoder")
        out = output_shape(self.specs, N_CHANNELS, self.n_points)
        if out != (N_CHANNELS, self.n_points):
            raise ShapeMismatch(f"architecture maps (2, {self.n_points}) to {out}")
        lat = output_shape(self.specs[: self.latent_index], N_CHANNELS, self.n_points)
        if lat[0] * lat[1] >= N_CHANNELS * self.n_points:
            raise ShapeMismatch(f"bottleneck {lat} is not smaller than the input")
        shapes = self.param_shapes()
        if self.params and [(w.shape, b.shape) for w, b in self.params] != shapes:
            raise ShapeMismatch("parameter shapes do not match architecture")

    @classmethod
    def create(cls, specs=None, latent_index=None, seed: int = 0, n_points: int = N_POINTS):
        if specs is None:
            specs, latent_index = default_architecture()
        m = cls(list(specs), latent_index, [], n_points)
        m.params = glorot_init(m.specs, seed)
        return m

    def param_shapes(self):
        return [(s.weight_shape, (s.out_ch,)) for s in self.specs if isinstance(s, PARAM_LAYERS)]

    @property
    def latent_shape(self) -> tuple[int, int]:
        return output_shape(self.specs[: self.latent_index], N_CHANNELS, self.n_points)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.params)

    def flat_params(self) -> list[np.ndarray]:
        out = []
        for w, b in self.params:
            out.extend([w, b])
        return out

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel(list(self.specs), self.latent_index,
                                [(w.copy(), b.copy()) for w, b in self.params], self.n_points)

    def architecture(self) -> dict:
        return architecture_to_dict(self.specs, self.latent_index)


def glorot_init(specs, seed: int) -> list:
    """Glorot-uniform weights (fan counts include kernel width), zero biases.

    Weights are drawn in layer order, element by element in C order, from a
    single PCG32 stream.
    """
    rng = Pcg32(seed, seq=0x5AE)
    params = []
    for s in specs:
        if not isinstance(s, PARAM_LAYERS):
            continue
        fan_in = s.in_ch * s.kernel
        fan_out = s.out_ch * s.kernel
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        shape = s.weight_shape
        w = np.array([rng.uniform(-limit, limit) for _ in range(int(np.prod(shape)))]).reshape(shape)
        params.append((w, np.zeros(s.out_ch)))
    return params


def model_forward(m: AutoencoderModel, x, keep_cache: bool = True):
    """Run the stack on ``(N, 2, n)`` input.

    Returns ``(reconstruction, latent, cache)``; the reconstruction and
    latent are ``(N, C, L)`` arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (N_CHANNELS, m.n_points):
        raise ShapeMismatch(f"expected input (N, 2, {m.n_points}), got {x.shape}")
    cache = []
    latent = None
    h = np.ascontiguousarray(x.transpose(1, 0, 2))
    pi = 0
    for li, s in enumerate(m.specs):
        if li == m.latent_index:
            latent = h
        entry = None
        if isinstance(s, Conv1D):
            w, b = m.params[pi]
            pi += 1
            h, entry = L.conv_cnl(h, w, b)
        elif isinstance(s, TransConv1D):
            w, b = m.params[pi]
            pi += 1
            h, entry = L.transconv_cnl(h, w, b)
        elif isinstance(s, MaxPool1D):
            h, entry = L.maxpool_cnl(h, s.window)
        elif isinstance(s, Upsample1D):
            h = L.upsample_cnl(h, s.factor)
        elif s.kind == "relu":
            entry = h
            h = L.relu_forward(h)
        cache.append(entry if keep_cache else None)
    if not np.all(np.isfinite(h)):
        raise NumericalFault("non-finite values in model output")
    return h.transpose(1, 0, 2), latent.transpose(1, 0, 2), cache


def model_backward(m: AutoencoderModel, cache, grad_out) -> list:
    """Parameter gradients ``[(gw, gb), ...]`` aligned with ``m.params``."""
    grads = [None] * len(m.params)
    pi = len(m.params)
    g = np.ascontiguousarray(np.asarray(grad_out, dtype=np.float64).transpose(1, 0, 2))
    for li in range(len(m.specs) - 1, -1, -1):
        s = m.specs[li]
        entry = cache[li]
        if isinstance(s, PARAM_LAYERS):
            pi -= 1
            back = L.conv_cnl_backward if isinstance(s, Conv1D) else L.transconv_cnl_backward
            # nothing upstream of the first parameterised layer needs a gradient
            g, gw, gb = back(entry, m.params[pi][0], g, need_input_grad=pi > 0)
            grads[pi] = (gw, gb)
            if pi == 0:
                break
        elif isinstance(s, MaxPool1D):
            g = L.maxpool_cnl_backward(entry, g, s.window)
        elif isinstance(s, Upsample1D):
            g = L.upsample_cnl_backward(g, s.factor)
        elif s.kind == "relu":
            g = L.relu_backward(entry, g)
        if li == 0:
            break
    return grads


def mae_loss(x, x_hat):
    """Sum of per-channel mean absolute errors (channel 0 = I, 1 = V).

    Returns ``(loss, grad_wrt_x_hat, (mae_i, mae_v))``. The subgradient at
    zero residual is 0.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim != 3 or x.shape[1] != N_CHANNELS:
        raise ShapeMismatch(f"mae_loss needs matching (N, 2, L) arrays, got {x.shape} and {x_hat.shape}")
    r = x_hat - x
    count = x.shape[0] * x.shape[2]
    mae_i = np.abs(r[:, 0]).sum() / count
    mae_v = np.abs(r[:, 1]).sum() / count
    return float(mae_i + mae_v), np.sign(r) / count, (float(mae_i), float(mae_v))
