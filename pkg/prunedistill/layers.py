"""Layer descriptors, architecture specs and their static shape algebra."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, ClassVar, Iterator

from prunedistill.errors import ArchitectureError, ConfigError
from prunedistill.tensor import round_half_away

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    pad: int = 0
    has_bias: bool = True
    kind: ClassVar[str] = "conv2d"

    @property
    def area(self) -> int:
        return self.kh * self.kw

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_ch, self.in_ch, self.kh, self.kw)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    has_bias: bool = True
    kind: ClassVar[str] = "dense"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_features, self.in_features)


@dataclass(frozen=True)
class BatchNorm:
    ch: int
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    kind: ClassVar[str] = "batchnorm"


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class MaxPool:
    k: int = 2
    stride: int = 2
    kind: ClassVar[str] = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class ResidualBlock:
    body: tuple = ()
    # 1x1 conv on the shortcut; None means identity
    projection: Conv2d | None = None
    kind: ClassVar[str] = "residual"


LayerSpec = Conv2d | Dense | BatchNorm | ReLU | MaxPool | Flatten | ResidualBlock

_KINDS = {cls.kind: cls for cls in (Conv2d, Dense, BatchNorm, ReLU, MaxPool, Flatten, ResidualBlock)}


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple = ()
    name: str = "net"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        unknown = set(d) - {"name", "input_shape", "num_classes", "layers"}
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        try:
            arch = cls(
                input_shape=tuple(int(v) for v in d["input_shape"]),
                num_classes=int(d["num_classes"]),
                layers=tuple(layer_from_dict(x) for x in d["layers"]),
                name=str(d.get("name", "net")),
            )
        except KeyError as err:
            raise ConfigError(f"architecture is missing key {err}") from None
        check_valid_arch(arch)
        return arch

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def layer_to_dict(layer: LayerSpec) -> dict:
    d = {"kind": layer.kind}
    if isinstance(layer, ResidualBlock):
        d["body"] = [layer_to_dict(x) for x in layer.body]
        d["projection"] = layer_to_dict(layer.projection) if layer.projection else None
        return d
    d.update(asdict(layer))
    return d


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}, expected one of {sorted(_KINDS)}")
    if kind == "residual":
        unknown = set(d) - {"body", "projection"}
        if unknown:
            raise ConfigError(f"unknown keys for residual block: {sorted(unknown)}")
        proj = d.get("projection")
        return ResidualBlock(
            body=tuple(layer_from_dict(x) for x in d.get("body", [])),
            projection=layer_from_dict(proj) if proj else None,
        )
    try:
        return _KINDS[kind](**d)
    except TypeError as err:
        raise ConfigError(f"bad {kind} layer {d}: {err}") from None


# --- shape algebra ---------------------------------------------------------


def output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Static output shape of one layer for a single sample of ``shape``."""
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ArchitectureError(f"conv expects ({layer.in_ch}, H, W), got {shape}")
        if layer.kh < 1 or layer.kw < 1 or layer.stride < 1 or layer.pad < 0:
            raise ArchitectureError(f"bad conv geometry {layer}")
        h = (shape[1] + 2 * layer.pad - layer.kh) // layer.stride + 1
        w = (shape[2] + 2 * layer.pad - layer.kw) // layer.stride + 1
        if h < 1 or w < 1:
            raise ArchitectureError(f"conv {layer} collapses spatial size {shape[1:]}")
        return (layer.out_ch, h, w)
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ArchitectureError(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.ch:
            raise ArchitectureError(f"batchnorm over {layer.ch} channels got {shape}")
        return shape
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3 or layer.k < 1 or layer.stride < 1:
            raise ArchitectureError(f"maxpool {layer} on {shape}")
        h = (shape[1] - layer.k) // layer.stride + 1
        w = (shape[2] - layer.k) // layer.stride + 1
        if h < 1 or w < 1:
            raise ArchitectureError(f"maxpool {layer} collapses spatial size {shape[1:]}")
        return (shape[0], h, w)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, ResidualBlock):
        out = shape
        for inner in layer.body:
            if isinstance(inner, (Dense, Flatten, ResidualBlock, MaxPool)):
                raise ArchitectureError(f"{inner.kind} is not allowed inside a residual block")
            out = output_shape(inner, out)
        short = output_shape(layer.projection, shape) if layer.projection else shape
        if short != out:
            raise ArchitectureError(f"residual branches disagree: body {out} vs shortcut {short}")
        return out
    raise ArchitectureError(f"unknown layer {layer!r}")


def infer_shapes(arch: ArchitectureSpec) -> list[tuple[int, ...]]:
    shapes = []
    shape = tuple(arch.input_shape)
    for layer in arch.layers:
        shape = output_shape(layer, shape)
        shapes.append(shape)
    return shapes


def check_valid_arch(arch: ArchitectureSpec) -> None:
    if len(arch.input_shape) != 3 or min(arch.input_shape) < 1:
        raise ArchitectureError(f"input shape must be (C, H, W), got {arch.input_shape}")
    if arch.num_classes < 1:
        raise ArchitectureError("num_classes must be positive")
    shapes = infer_shapes(arch)
    if not shapes or shapes[-1] != (arch.num_classes,):
        raise ArchitectureError(
            f"{arch.name}: network ends in {shapes[-1] if shapes else arch.input_shape}, "
            f"expected ({arch.num_classes},) logits"
        )


# --- parameter naming ------------------------------------------------------


def iter_param_layers(arch: ArchitectureSpec) -> Iterator[tuple[str, LayerSpec]]:
    """Parameterized layers in forward order with their name prefixes."""
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, ResidualBlock):
            for j, inner in enumerate(layer.body):
                if isinstance(inner, (Conv2d, BatchNorm)):
                    yield f"{i}.body.{j}", inner
            if layer.projection is not None:
                yield f"{i}.proj", layer.projection
        elif isinstance(layer, (Conv2d, Dense, BatchNorm)):
            yield str(i), layer


def param_shapes(arch: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for prefix, layer in iter_param_layers(arch):
        if isinstance(layer, (Conv2d, Dense)):
            shapes[f"{prefix}.weight"] = layer.weight_shape
            if layer.has_bias:
                out = layer.out_ch if isinstance(layer, Conv2d) else layer.out_features
                shapes[f"{prefix}.bias"] = (out,)
        else:
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{prefix}.{suffix}"] = (layer.ch,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith((".running_mean", ".running_var"))


def trainable_names(arch: ArchitectureSpec) -> list[str]:
    return [n for n in param_shapes(arch) if is_trainable(n)]


def prunable_names(arch: ArchitectureSpec) -> list[str]:
    """Conv kernels and dense matrices, classifier included; biases and BN exempt."""
    return [
        f"{prefix}.weight"
        for prefix, layer in iter_param_layers(arch)
        if isinstance(layer, (Conv2d, Dense))
    ]


def prunable_layers(arch: ArchitectureSpec) -> list[tuple[str, LayerSpec]]:
    return [(p, layer) for p, layer in iter_param_layers(arch) if isinstance(layer, (Conv2d, Dense))]


# --- width rewriting -------------------------------------------------------

# (prefix, teacher layer, incoming width) -> new output width
WidthFn = Callable[[str, LayerSpec, int], int]


def rebuild_widths(arch: ArchitectureSpec, choose: WidthFn, name: str | None = None) -> ArchitectureSpec:
    """Rewrite every hidden width of ``arch`` through ``choose``.

    The input channel count and the classifier output stay fixed; BN widths,
    dense fan-in after Flatten and residual shortcuts follow the new widths.
    """
    last_dense = max((i for i, layer in enumerate(arch.layers) if isinstance(layer, Dense)), default=-1)
    shape = tuple(arch.input_shape)
    layers = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, ResidualBlock):
            new = _rebuild_block(i, layer, shape, choose)
        elif isinstance(layer, Conv2d):
            new = replace(layer, in_ch=shape[0], out_ch=choose(str(i), layer, shape[0]))
        elif isinstance(layer, Dense):
            out = arch.num_classes if i == last_dense else choose(str(i), layer, shape[0])
            new = replace(layer, in_features=shape[0], out_features=out)
        elif isinstance(layer, BatchNorm):
            new = replace(layer, ch=shape[0])
        else:
            new = layer
        shape = output_shape(new, shape)
        layers.append(new)
    rebuilt = ArchitectureSpec(arch.input_shape, arch.num_classes, tuple(layers), name or arch.name)
    check_valid_arch(rebuilt)
    return rebuilt


def _rebuild_block(i: int, block: ResidualBlock, shape: tuple, choose: WidthFn) -> ResidualBlock:
    body = []
    inner_shape = shape
    stride = 1
    for j, inner in enumerate(block.body):
        if isinstance(inner, Conv2d):
            inner = replace(inner, in_ch=inner_shape[0], out_ch=choose(f"{i}.body.{j}", inner, inner_shape[0]))
            stride *= inner.stride
        elif isinstance(inner, BatchNorm):
            inner = replace(inner, ch=inner_shape[0])
        inner_shape = output_shape(inner, inner_shape)
        body.append(inner)
    projection = None
    old = block.projection
    if old is not None or inner_shape != shape:
        projection = Conv2d(
            in_ch=shape[0],
            out_ch=inner_shape[0],
            kh=1,
            kw=1,
            stride=stride,
            has_bias=old.has_bias if old else False,
        )
    return ResidualBlock(body=tuple(body), projection=projection)


def scale_channels(arch: ArchitectureSpec, factor: float) -> ArchitectureSpec:
    """Multiply every hidden width by ``factor`` (VGG19 x2 gives VGG19DBL)."""
    if factor <= 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")

    def scaled(_prefix, layer, _in_width):
        width = layer.out_ch if isinstance(layer, Conv2d) else layer.out_features
        return max(1, round_half_away(width * factor))

    suffix = "" if factor == 1 else f"x{factor:g}"
    return rebuild_widths(arch, scaled, name=f"{arch.name}{suffix}")


def conv_widths(arch: ArchitectureSpec) -> list[int]:
    return [layer.out_ch for _, layer in prunable_layers(arch) if isinstance(layer, Conv2d)]


def trace_shapes(arch: ArchitectureSpec, input_shape: tuple | None = None) -> list[tuple[str, LayerSpec, tuple, tuple]]:
    """(prefix, layer, in_shape, out_shape) for every layer, block internals expanded."""
    rows = []
    shape = tuple(input_shape or arch.input_shape)
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, ResidualBlock):
            inner_shape = shape
            for j, inner in enumerate(layer.body):
                out = output_shape(inner, inner_shape)
                rows.append((f"{i}.body.{j}", inner, inner_shape, out))
                inner_shape = out
            if layer.projection is not None:
                rows.append((f"{i}.proj", layer.projection, shape, output_shape(layer.projection, shape)))
        out = output_shape(layer, shape)
        if not isinstance(layer, ResidualBlock):
            rows.append((str(i), layer, shape, out))
        shape = out
    return rows
