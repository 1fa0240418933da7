"""Derive a narrower dense student from a pruned teacher's per-layer nonzero counts.

Walking the teacher's layers in forward order, each conv layer i gets

    c_i = max(1, round(n_i / (A_i * c_{i-1})))

output channels, with n_i the layer's surviving weights, A_i its kernel
area and round() half away from zero. Hidden dense layers use A = 1; the
classifier keeps the class count and its fan-in follows the last conv.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.counting import count_params, layer_labels
from prunedistill.errors import ConfigError
from prunedistill.layers import ArchitectureSpec, Conv2d, Dense, prunable_layers, rebuild_widths
from prunedistill.tensor import round_half_away

log = logging.getLogger(__name__)

PLAN_COLUMNS = ("layer", "A", "n_i", "c_i", "student_params", "ratio")


@dataclass(frozen=True)
class CensusRow:
    name: str
    label: str
    area: int
    in_ch: int
    out_ch: int
    nonzero: int

    @property
    def capacity(self) -> int:
        return self.area * self.in_ch * self.out_ch


@dataclass(frozen=True)
class LayerCensus:
    rows: tuple

    @property
    def total(self) -> int:
        return sum(row.nonzero for row in self.rows)

    def counts(self) -> dict[str, int]:
        return {row.name: row.nonzero for row in self.rows}


@dataclass(frozen=True)
class StudentPlan:
    channels: tuple
    arch: ArchitectureSpec
    layer_params: dict
    total: int


def _geometry(layer) -> tuple[int, int, int]:
    if isinstance(layer, Conv2d):
        return layer.area, layer.in_ch, layer.out_ch
    return 1, layer.in_features, layer.out_features


def census_from_counts(arch: ArchitectureSpec, counts) -> LayerCensus:
    """Census with explicit nonzero counts, one per prunable layer in forward order."""
    layers = prunable_layers(arch)
    counts = list(counts)
    if len(counts) != len(layers):
        raise ConfigError(f"{arch.name} has {len(layers)} prunable layers, got {len(counts)} counts")
    labels = layer_labels(arch)
    rows = []
    for (prefix, layer), n in zip(layers, counts):
        area, cin, cout = _geometry(layer)
        if not 0 <= n <= area * cin * cout:
            raise ConfigError(f"{labels[prefix]}: {n} nonzero weights outside [0, {area * cin * cout}]")
        rows.append(CensusRow(prefix, labels[prefix], area, cin, cout, int(n)))
    return LayerCensus(tuple(rows))


def census(ckpt: MaskedCheckpoint) -> LayerCensus:
    if not ckpt.masks:
        raise ConfigError(f"checkpoint of {ckpt.arch.name} carries no masks")
    counts = []
    for prefix, _ in prunable_layers(ckpt.arch):
        mask = ckpt.masks.get(f"{prefix}.weight")
        if mask is None:
            raise ConfigError(f"checkpoint has no mask for {prefix}.weight")
        counts.append(int(np.count_nonzero(mask)))
    return census_from_counts(ckpt.arch, counts)


def solve_student_channels(teacher_arch: ArchitectureSpec, layer_census: LayerCensus, name: str | None = None) -> StudentPlan:
    expected = [(p, _geometry(layer)) for p, layer in prunable_layers(teacher_arch)]
    found = [(row.name, (row.area, row.in_ch, row.out_ch)) for row in layer_census.rows]
    if expected != found:
        raise ConfigError(f"census does not describe {teacher_arch.name}")
    counts = layer_census.counts()

    def choose(prefix: str, layer, in_width: int) -> int:
        area = layer.area if isinstance(layer, Conv2d) else 1
        return max(1, round_half_away(counts[prefix] / (area * in_width)))

    arch = rebuild_widths(teacher_arch, choose, name=name or f"{teacher_arch.name}_student")
    params = count_params(arch)
    channels = (arch.input_shape[0], *(layer.out_ch for _, layer in prunable_layers(arch) if isinstance(layer, Conv2d)))
    plan = StudentPlan(channels, arch, {row.name: row.value for row in params.rows}, params.total)
    log.info("student %s: %d weights for a census of %d", arch.name, plan.total, layer_census.total)
    return plan


def plan_table(layer_census: LayerCensus, plan: StudentPlan) -> list[dict]:
    """Per teacher layer: kernel area, nonzero count, solved width, student weights, ratio %."""
    widths = {p: _geometry(layer)[2] for p, layer in prunable_layers(plan.arch)}
    rows = []
    for row in layer_census.rows:
        student = plan.layer_params[row.name]
        rows.append(
            {
                "layer": row.label,
                "A": row.area,
                "n_i": row.nonzero,
                "c_i": widths[row.name],
                "student_params": student,
                "ratio": round(100.0 * student / row.capacity, 2),
            }
        )
    rows.append(
        {
            "layer": "total",
            "A": "",
            "n_i": layer_census.total,
            "c_i": "",
            "student_params": plan.total,
            "ratio": round(100.0 * plan.total / sum(r.capacity for r in layer_census.rows), 2),
        }
    )
    return rows


def write_plan_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=PLAN_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path
