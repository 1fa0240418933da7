"""Network builders (VGG family, desk-scale nets) and architecture files."""
import json
import logging
from pathlib import Path

from prunedistill.errors import ConfigError
from prunedistill.layers import (
    ArchitectureSpec,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ReLU,
    ResidualBlock,
    check_valid_arch,
    output_shape,
    scale_channels,
)

log = logging.getLogger(__name__)

POOL = "M"

# single-FC CIFAR variants
VGG_CONFIGS = {
    "vgg11": [64, POOL, 128, POOL, 256, 256, POOL, 512, 512, POOL, 512, 512, POOL],
    "vgg16": [64, 64, POOL, 128, 128, POOL, 256, 256, 256, POOL, 512, 512, 512, POOL, 512, 512, 512, POOL],
    "vgg19": [
        64, 64, POOL,
        128, 128, POOL,
        256, 256, 256, 256, POOL,
        512, 512, 512, 512, POOL,
        512, 512, 512, 512, POOL,
    ],
    "mini_vgg": [16, POOL, 32, POOL, 64, POOL],
}

CIFAR_SHAPE = (3, 32, 32)
DESK_SHAPE = (3, 16, 16)


def vgg(
    channels: list,
    input_shape: tuple = CIFAR_SHAPE,
    num_classes: int = 100,
    batch_norm: bool = True,
    name: str = "vgg",
) -> ArchitectureSpec:
    """3x3/pad-1 conv stack, ``"M"`` entries are 2x2 max pools, one classifier."""
    layers = []
    shape = tuple(input_shape)
    for c in channels:
        if c == POOL:
            new = [MaxPool(2, 2)]
        else:
            conv = Conv2d(shape[0], int(c), 3, 3, stride=1, pad=1, has_bias=not batch_norm)
            new = [conv, BatchNorm(int(c)), ReLU()] if batch_norm else [conv, ReLU()]
        for layer in new:
            shape = output_shape(layer, shape)
        layers.extend(new)
    layers.append(Flatten())
    flat = 1
    for d in shape:
        flat *= d
    layers.append(Dense(flat, num_classes))
    arch = ArchitectureSpec(tuple(input_shape), num_classes, tuple(layers), name)
    check_valid_arch(arch)
    return arch


def basic_block(in_ch: int, out_ch: int, stride: int = 1) -> ResidualBlock:
    body = (
        Conv2d(in_ch, out_ch, 3, 3, stride=stride, pad=1, has_bias=False),
        BatchNorm(out_ch),
        ReLU(),
        Conv2d(out_ch, out_ch, 3, 3, stride=1, pad=1, has_bias=False),
        BatchNorm(out_ch),
    )
    projection = None
    if stride != 1 or in_ch != out_ch:
        projection = Conv2d(in_ch, out_ch, 1, 1, stride=stride, has_bias=False)
    return ResidualBlock(body, projection)


def mini_resnet(
    widths: tuple = (16, 32),
    input_shape: tuple = DESK_SHAPE,
    num_classes: int = 10,
    name: str = "mini_resnet",
) -> ArchitectureSpec:
    """Stem conv, one basic block per width (stride 2 after the first), pooled classifier."""
    layers = [Conv2d(input_shape[0], widths[0], 3, 3, pad=1, has_bias=False), BatchNorm(widths[0]), ReLU()]
    in_ch = widths[0]
    for i, w in enumerate(widths):
        layers += [basic_block(in_ch, w, stride=1 if i == 0 else 2), ReLU()]
        in_ch = w
    layers.append(MaxPool(2, 2))
    shape = tuple(input_shape)
    for layer in layers:
        shape = output_shape(layer, shape)
    layers += [Flatten(), Dense(shape[0] * shape[1] * shape[2], num_classes)]
    arch = ArchitectureSpec(tuple(input_shape), num_classes, tuple(layers), name)
    check_valid_arch(arch)
    return arch


def named(name: str, input_shape: tuple = CIFAR_SHAPE, num_classes: int = 100) -> ArchitectureSpec:
    if name == "vgg19_dbl":
        return scale_channels(vgg(VGG_CONFIGS["vgg19"], input_shape, num_classes, name="vgg19"), 2.0)
    if name == "mini_resnet":
        return mini_resnet(input_shape=input_shape, num_classes=num_classes)
    if name not in VGG_CONFIGS:
        raise ConfigError(f"unknown architecture {name!r}")
    return vgg(VGG_CONFIGS[name], input_shape, num_classes, name=name)


BUILDER_KEYS = {"builder", "name", "channels", "widths", "input_shape", "num_classes", "batch_norm", "scale"}


def from_builder(d: dict) -> ArchitectureSpec:
    unknown = set(d) - BUILDER_KEYS
    if unknown:
        raise ConfigError(f"unknown architecture builder keys: {sorted(unknown)}")
    input_shape = tuple(d.get("input_shape", CIFAR_SHAPE))
    num_classes = int(d.get("num_classes", 100))
    name = d.get("name", d["builder"])
    if d["builder"] == "vgg":
        channels = [c if c == POOL else int(c) for c in d["channels"]]
        arch = vgg(channels, input_shape, num_classes, d.get("batch_norm", True), name)
    elif d["builder"] == "mini_resnet":
        arch = mini_resnet(tuple(d.get("widths", (16, 32))), input_shape, num_classes, name)
    else:
        raise ConfigError(f"unknown builder {d['builder']!r}")
    scale = float(d.get("scale", 1.0))
    return arch if scale == 1.0 else scale_channels(arch, scale)


def load_architecture(path) -> ArchitectureSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"architecture file not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    arch = from_builder(d) if "builder" in d else ArchitectureSpec.from_dict(d)
    log.debug("loaded architecture %s from %s", arch.name, path)
    return arch
