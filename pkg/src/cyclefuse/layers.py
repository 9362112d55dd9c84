"""Declarative layer stacks with static shape propagation.

A :class:`LayerSpec` is an ordered tuple of :class:`Layer` descriptors plus a
declared input and output shape (batch dimension excluded). Shapes are
propagated arithmetically, so large presets can be checked without
allocating anything, and the same spec builds a ``torch.nn.Sequential``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

KINDS = {
    "reshape", "flatten", "conv3d", "transposed_conv3d", "upsample", "batch_norm",
    "max_pool3d", "linear", "tanh", "activation", "global_avg_pool",
}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def L(kind: str, **params) -> Layer:
    return Layer(kind, params)


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _tconv_out(n, k, s, p, op):
    return (n - 1) * s - 2 * p + k + op


def layer_output_shape(layer: Layer, shape: tuple) -> tuple:
    p = layer.params
    kind = layer.kind
    if kind == "reshape":
        target = tuple(p["shape"])
        if math.prod(target) != math.prod(shape):
            raise ShapeError(f"cannot reshape {shape} to {target}")
        return target
    if kind == "flatten":
        return (math.prod(shape),)
    if kind in {"tanh", "activation"}:
        return shape
    if kind == "linear":
        if len(shape) != 1 or shape[0] != p["in_features"]:
            raise ShapeError(f"linear expects ({p['in_features']},), got {shape}")
        return (p["out_features"],)
    if len(shape) != 4:
        raise ShapeError(f"{kind} expects (C, D, H, W), got {shape}")
    c, *spatial = shape
    if kind == "batch_norm":
        return shape
    if kind == "global_avg_pool":
        return (c,)
    if kind == "upsample":
        if "size" in p:
            return (c, *tuple(p["size"]))
        return (c, *(int(n * p["scale"]) for n in spatial))
    if kind == "max_pool3d":
        k = _triple(p["kernel"])
        s = _triple(p.get("stride", p["kernel"]))
        out = tuple(_conv_out(n, kk, ss, 0) for n, kk, ss in zip(spatial, k, s))
    elif kind in {"conv3d", "transposed_conv3d"}:
        if c != p["in_channels"]:
            raise ShapeError(f"{kind} expects {p['in_channels']} channels, got {c}")
        k = _triple(p["kernel"])
        s = _triple(p.get("stride", 1))
        pad = _triple(p.get("padding", 0))
        if kind == "conv3d":
            out = tuple(_conv_out(n, kk, ss, pp) for n, kk, ss, pp in zip(spatial, k, s, pad))
        else:
            op = _triple(p.get("output_padding", 0))
            out = tuple(_tconv_out(n, kk, ss, pp, o) for n, kk, ss, pp, o in zip(spatial, k, s, pad, op))
        c = p["out_channels"]
    else:  # pragma: no cover
        raise ShapeError(kind)
    if min(out) < 1:
        raise ShapeError(f"{kind} produced empty spatial shape {out} from {shape}")
    return (c, *out)


def propagate_shapes(layers, input_shape) -> list[tuple]:
    shapes = [tuple(input_shape)]
    for layer in layers:
        try:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        except ShapeError as exc:
            raise ShapeError(f"layer {len(shapes) - 1} ({layer.kind}): {exc}") from None
    return shapes


@dataclass(frozen=True)
class LayerSpec:
    layers: tuple
    input_shape: tuple
    output_shape: tuple

    def propagate(self) -> list[tuple]:
        """Shapes after each layer; the first entry is the input shape."""
        return propagate_shapes(self.layers, self.input_shape)

    def check(self) -> "LayerSpec":
        got = self.propagate()[-1]
        if got != tuple(self.output_shape):
            raise ShapeError(f"spec declares output {tuple(self.output_shape)} but propagates to {got}")
        return self

    def count(self, kind: str) -> int:
        return sum(layer.kind == kind for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            tuple(Layer.from_dict(x) for x in d["layers"]),
            tuple(d["input_shape"]),
            tuple(d["output_shape"]),
        )


class _Reshape(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


class _GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3, 4))


def _make(layer: Layer) -> nn.Module:
    p = layer.params
    kind = layer.kind
    if kind == "reshape":
        return _Reshape(p["shape"])
    if kind == "flatten":
        return nn.Flatten()
    if kind == "conv3d":
        return nn.Conv3d(p["in_channels"], p["out_channels"], _triple(p["kernel"]),
                         stride=_triple(p.get("stride", 1)), padding=_triple(p.get("padding", 0)),
                         bias=p.get("bias", True))
    if kind == "transposed_conv3d":
        return nn.ConvTranspose3d(p["in_channels"], p["out_channels"], _triple(p["kernel"]),
                                  stride=_triple(p.get("stride", 1)), padding=_triple(p.get("padding", 0)),
                                  output_padding=_triple(p.get("output_padding", 0)),
                                  bias=p.get("bias", True))
    if kind == "upsample":
        mode = p.get("mode", "trilinear")
        kw = {"align_corners": False} if mode == "trilinear" else {}
        if "size" in p:
            return nn.Upsample(size=tuple(p["size"]), mode=mode, **kw)
        return nn.Upsample(scale_factor=p["scale"], mode=mode, **kw)
    if kind == "batch_norm":
        return nn.BatchNorm3d(p["num_features"])
    if kind == "max_pool3d":
        return nn.MaxPool3d(_triple(p["kernel"]), stride=_triple(p.get("stride", p["kernel"])))
    if kind == "linear":
        return nn.Linear(p["in_features"], p["out_features"], bias=p.get("bias", True))
    if kind == "tanh":
        return nn.Tanh()
    if kind == "activation":
        name = p.get("name", "relu")
        if name == "relu":
            return nn.ReLU()
        if name == "leaky_relu":
            return nn.LeakyReLU(p.get("slope", 0.2))
        raise ValueError(f"unknown activation {name!r}")
    if kind == "global_avg_pool":
        return _GlobalAvgPool()
    raise ValueError(kind)  # pragma: no cover


def build(spec: LayerSpec, device=None) -> nn.Sequential:
    spec.check()
    with torch.device(device or "cpu"):
        return nn.Sequential(*[_make(layer) for layer in spec.layers])


def init_gaussian(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """N(0, std) conv/linear weights, zero biases, unit/zero batch-norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_kaiming(module: nn.Module, generator: torch.Generator) -> None:
    """PyTorch's default conv/linear initialization, drawn from ``generator``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=generator)
            if m.bias is not None:
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
                bound = 1 / math.sqrt(fan_in) if fan_in > 0 else 0
                nn.init.uniform_(m.bias, -bound, bound, generator=generator)


# ---------------------------------------------------------------------------
# presets

def _conv(cin, cout, k=3, s=1, p=1, bias=True):
    return L("conv3d", in_channels=cin, out_channels=cout, kernel=k, stride=s, padding=p, bias=bias)


def _tconv(cin, cout, k, s, p):
    # bias is redundant ahead of batch norm
    return L("transposed_conv3d", in_channels=cin, out_channels=cout, kernel=k, stride=s, padding=p, bias=False)


def _bn(c):
    return L("batch_norm", num_features=c)


RELU = L("activation", name="relu")
LRELU = L("activation", name="leaky_relu", slope=0.2)


def g1_spec(fnc_dim: int, volume_shape, preset: str = "desk", channels=None) -> LayerSpec:
    """FNC vector -> volume: five transposed convolutions with batch norm,
    upsampling after the third and fifth, then a convolution and tanh."""
    vs = tuple(volume_shape)
    if preset == "paper":
        ch = channels or (256, 128, 64, 32, 16)
        first = (4, 1, 0)
        rest = [(4, 2, 1)] * 4
        mid = tuple(n // 4 for n in vs)
        mode = "trilinear"
    elif preset == "desk":
        ch = channels or (32, 16, 16, 8, 4)
        first = (2, 1, 0)
        rest = [(4, 2, 1), (3, 1, 1), (3, 1, 1), (3, 1, 1)]
        mid = tuple(n // 2 for n in vs)
        mode = "nearest"
    else:
        raise ValueError(f"unknown preset {preset!r}")
    layers = [L("reshape", shape=(fnc_dim, 1, 1, 1))]
    cin = fnc_dim
    for i, (cout, (k, s, p)) in enumerate(zip(ch, [first, *rest])):
        layers += [_tconv(cin, cout, k, s, p), _bn(cout), RELU]
        cin = cout
        if i == 2:
            layers.append(L("upsample", size=mid, mode=mode))
    layers += [
        L("upsample", size=vs, mode=mode),
        _conv(cin, 1),
        L("tanh"),
        L("reshape", shape=vs),
    ]
    return LayerSpec(tuple(layers), (fnc_dim,), vs).check()


def g2_spec(fnc_dim: int, volume_shape, preset: str = "desk", channels=None) -> LayerSpec:
    """Volume -> FNC vector: five convolutions each with batch norm and max-pool,
    then a linear layer and tanh."""
    vs = tuple(volume_shape)
    if preset == "paper":
        ch = channels or (8, 16, 32, 64, 64)
    elif preset == "desk":
        ch = channels or (8, 16, 16, 32, 32)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    layers = [L("reshape", shape=(1, *vs))]
    shape = (1, *vs)
    cin = 1
    for cout in ch:
        layers += [_conv(cin, cout, bias=False), _bn(cout), LRELU]
        k = 2 if min(shape[1:]) >= 4 else 1
        layers.append(L("max_pool3d", kernel=k))
        cin = cout
        shape = propagate_shapes(layers, vs)[-1]
    flat = math.prod(shape)
    layers += [L("flatten"), L("linear", in_features=flat, out_features=fnc_dim), L("tanh")]
    return LayerSpec(tuple(layers), vs, (fnc_dim,)).check()


def d1_spec(volume_shape, preset: str = "desk", channels=None) -> LayerSpec:
    """Volume -> realness score: five convolutions, max-pool after the first,
    second and fourth, global average to one scalar."""
    vs = tuple(volume_shape)
    if preset == "paper":
        ch = channels or (16, 32, 64, 64)
    elif preset == "desk":
        ch = channels or (8, 16, 16, 32)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    layers = [L("reshape", shape=(1, *vs))]
    cin = 1
    for i, cout in enumerate(ch):
        layers += [_conv(cin, cout), LRELU]
        if i in (0, 1, 3):
            layers.append(L("max_pool3d", kernel=2))
        cin = cout
    layers += [_conv(cin, 1), L("global_avg_pool")]
    return LayerSpec(tuple(layers), vs, (1,)).check()


def d2_spec(fnc_dim: int, preset: str = "desk", hidden=None) -> LayerSpec:
    """FNC vector -> realness score: three linear layers."""
    if preset == "paper":
        h1, h2 = hidden or (256, 64)
    elif preset == "desk":
        h1, h2 = hidden or (64, 32)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    layers = (
        L("linear", in_features=fnc_dim, out_features=h1), LRELU,
        L("linear", in_features=h1, out_features=h2), LRELU,
        L("linear", in_features=h2, out_features=1),
    )
    return LayerSpec(layers, (fnc_dim,), (1,)).check()


def n_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
