"""Weight and multiply-accumulate counts per layer.

Headline totals cover conv kernels and dense matrices only; biases and BN
parameters (for weights) and BN/ReLU/pool/residual-add work (for MACs) are
tallied separately in ``other``.
"""
from dataclasses import dataclass, field

from prunedistill.layers import (
    ArchitectureSpec,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool,
    ReLU,
    ResidualBlock,
    output_shape,
    trace_shapes,
)


@dataclass(frozen=True)
class CountRow:
    name: str
    label: str
    kind: str
    value: int


@dataclass
class CountReport:
    rows: list = field(default_factory=list)
    other: int = 0

    @property
    def total(self) -> int:
        return sum(row.value for row in self.rows)

    def values(self) -> list[int]:
        return [row.value for row in self.rows]

    def by_label(self) -> dict[str, int]:
        return {row.label: row.value for row in self.rows}


def layer_labels(arch: ArchitectureSpec) -> dict[str, str]:
    """conv-0, conv-1, ... and fc (fc-0, fc-1, ... when there are several)."""
    rows = [(p, layer) for p, layer, _, _ in trace_shapes(arch) if isinstance(layer, (Conv2d, Dense))]
    n_dense = sum(1 for _, layer in rows if isinstance(layer, Dense))
    labels, conv_i, dense_i = {}, 0, 0
    for prefix, layer in rows:
        if isinstance(layer, Conv2d):
            labels[prefix] = f"conv-{conv_i}"
            conv_i += 1
        else:
            labels[prefix] = "fc" if n_dense == 1 else f"fc-{dense_i}"
            dense_i += 1
    return labels


def _prod(shape) -> int:
    out = 1
    for d in shape:
        out *= d
    return out


def count_params(arch: ArchitectureSpec) -> CountReport:
    labels = layer_labels(arch)
    report = CountReport()
    for prefix, layer, _, _ in trace_shapes(arch):
        if isinstance(layer, Conv2d):
            report.rows.append(CountRow(prefix, labels[prefix], layer.kind, layer.area * layer.in_ch * layer.out_ch))
            report.other += layer.out_ch if layer.has_bias else 0
        elif isinstance(layer, Dense):
            report.rows.append(CountRow(prefix, labels[prefix], layer.kind, layer.in_features * layer.out_features))
            report.other += layer.out_features if layer.has_bias else 0
        elif isinstance(layer, BatchNorm):
            # scale and shift; running statistics are buffers, not parameters
            report.other += 2 * layer.ch
    return report


def count_macs(arch: ArchitectureSpec, input_shape: tuple | None = None) -> CountReport:
    labels = layer_labels(arch)
    report = CountReport()
    for prefix, layer, _, out in trace_shapes(arch, input_shape):
        if isinstance(layer, Conv2d):
            macs = layer.area * layer.in_ch * layer.out_ch * out[1] * out[2]
            report.rows.append(CountRow(prefix, labels[prefix], layer.kind, macs))
        elif isinstance(layer, Dense):
            report.rows.append(CountRow(prefix, labels[prefix], layer.kind, layer.in_features * layer.out_features))
        elif isinstance(layer, (BatchNorm, ReLU)):
            report.other += _prod(out)
        elif isinstance(layer, MaxPool):
            report.other += _prod(out) * layer.k * layer.k
    # residual adds: one per output element of each block
    shape = tuple(input_shape or arch.input_shape)
    for layer in arch.layers:
        shape = output_shape(layer, shape)
        if isinstance(layer, ResidualBlock):
            report.other += _prod(shape)
    return report
