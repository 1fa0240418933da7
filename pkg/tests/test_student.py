"""Student widths solved from a pruned teacher's per-layer census."""
import csv

import numpy as np
import pytest

from prunedistill.architectures import mini_resnet, named
from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.errors import ConfigError
from prunedistill.layers import conv_widths
from prunedistill.pruning import global_magnitude_mask
from prunedistill.student import (
    PLAN_COLUMNS,
    census,
    census_from_counts,
    plan_table,
    solve_student_channels,
    write_plan_csv,
)
from prunedistill.verify import STUDENT79_WEIGHTS, VGG19_LAYER_WEIGHTS, VGG19_PRUNED79_CENSUS

SOLVED79 = [40, 50, 111, 98, 225, 188, 224, 171, 356, 234, 219, 100, 111, 85, 295, 124]


@pytest.fixture(scope="module")
def plan79():
    teacher = named("vgg19")
    return teacher, census_from_counts(teacher, VGG19_PRUNED79_CENSUS)


class TestSolver:
    def test_pruned_vgg19(self, plan79):
        teacher, layer_census = plan79
        plan = solve_student_channels(teacher, layer_census)
        assert list(plan.channels) == [3, *SOLVED79]
        assert plan.total == 4_177_870
        assert abs(plan.total - STUDENT79_WEIGHTS) / STUDENT79_WEIGHTS <= 0.02

    def test_first_layer(self, plan79):
        teacher, layer_census = plan79
        plan = solve_student_channels(teacher, layer_census)
        assert plan.layer_params["0"] == 1080

    def test_half_rounds_away_from_zero(self, plan79):
        # conv-12: 99450 / (9 * 100) = 110.5
        teacher, layer_census = plan79
        assert solve_student_channels(teacher, layer_census).channels[13] == 111

    def test_dense_census_reproduces_teacher(self):
        teacher = named("vgg19")
        plan = solve_student_channels(teacher, census_from_counts(teacher, VGG19_LAYER_WEIGHTS))
        assert plan.arch.layers == teacher.layers
        assert plan.total == 20_070_080

    def test_width_floor_of_one(self):
        teacher = named("mini_vgg", (3, 16, 16), 10)
        plan = solve_student_channels(teacher, census_from_counts(teacher, [0, 0, 0, 0]))
        assert conv_widths(plan.arch) == [1, 1, 1]
        assert plan.arch.num_classes == 10

    def test_residual_teacher(self):
        teacher = mini_resnet()
        ckpt = MaskedCheckpoint.fresh(teacher, seed=0)
        ckpt.masks = global_magnitude_mask(ckpt.params, 0.5, ckpt.masks)
        plan = solve_student_channels(teacher, census(ckpt), name="res_student")
        assert plan.arch.name == "res_student"
        assert plan.total < sum(m.size for m in ckpt.masks.values())

    def test_census_for_another_arch(self, plan79):
        _, layer_census = plan79
        with pytest.raises(ConfigError):
            solve_student_channels(named("vgg16"), layer_census)


class TestCensus:
    def test_counts_from_masks(self, tiny_ckpt):
        tiny_ckpt.masks["0.weight"][:, :, 0, 0] = False
        rows = census(tiny_ckpt).rows
        assert [row.label for row in rows] == ["conv-0", "conv-1", "fc"]
        assert rows[0].nonzero == 108 - 12
        assert rows[0].capacity == 108

    def test_wrong_count_length(self):
        with pytest.raises(ConfigError):
            census_from_counts(named("vgg19"), VGG19_PRUNED79_CENSUS[:-1])

    def test_count_over_capacity(self):
        counts = list(VGG19_LAYER_WEIGHTS)
        counts[0] += 1
        with pytest.raises(ConfigError):
            census_from_counts(named("vgg19"), counts)

    def test_maskless_checkpoint(self, tiny_ckpt):
        tiny_ckpt.masks = {}
        with pytest.raises(ConfigError):
            census(tiny_ckpt)


class TestPlanTable:
    def test_rows(self, plan79, tmp_path):
        teacher, layer_census = plan79
        rows = plan_table(layer_census, solve_student_channels(teacher, layer_census))
        assert len(rows) == 18
        assert rows[0] == {"layer": "conv-0", "A": 9, "n_i": 1087, "c_i": 40, "student_params": 1080, "ratio": 62.5}
        assert rows[-1]["layer"] == "total"
        assert rows[-1]["n_i"] == int(np.sum(VGG19_PRUNED79_CENSUS))
        assert rows[-1]["student_params"] == 4_177_870

        path = write_plan_csv(rows, tmp_path / "plan.csv")
        with path.open() as f:
            assert tuple(next(csv.reader(f))) == PLAN_COLUMNS
