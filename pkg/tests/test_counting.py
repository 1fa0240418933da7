"""Weight and MAC counts against the published VGG19 figures."""
import pytest

from prunedistill.architectures import VGG_CONFIGS, mini_resnet, named, vgg
from prunedistill.counting import count_macs, count_params, layer_labels
from prunedistill.verify import VGG19_LAYER_WEIGHTS, VGG19_WEIGHTS, probe_arch

ST79_CHANNELS = [40, 49, 111, 97, 225, 187, 224, 170, 356, 233, 220, 99, 111, 84, 297, 122]


def vgg19_with(widths):
    it = iter(widths)
    channels = [c if c == "M" else next(it) for c in VGG_CONFIGS["vgg19"]]
    return vgg(channels, name="custom")


class TestParams:
    def test_vgg19_per_layer(self):
        report = count_params(named("vgg19"))
        assert report.values() == VGG19_LAYER_WEIGHTS
        assert report.total == VGG19_WEIGHTS == 20_070_080

    def test_vgg19_labels(self):
        labels = count_params(named("vgg19")).by_label()
        assert labels["conv-0"] == 1728
        assert labels["conv-15"] == 2359296
        assert labels["fc"] == 51200

    def test_bn_and_bias_go_to_other(self):
        report = count_params(named("vgg19"))
        # 2 x 5504 BN channels plus the 100 classifier biases
        assert report.other == 11_108

    def test_vgg19_dbl(self):
        assert count_params(named("vgg19_dbl")).total == 80_174_464

    def test_student_fixture(self):
        assert count_params(vgg19_with(ST79_CHANNELS)).total == 4_153_613

    def test_cl1(self):
        cl1 = [64, 64, 64, 64, 128, 128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512]
        assert count_params(vgg19_with(cl1)).total == 11_001_536

    def test_cl2(self):
        cl2 = [64, 39, 179, 79, 354, 155, 362, 146, 614, 247, 500, 158, 271, 139, 547, 512]
        assert count_params(vgg19_with(cl2)).total == 9_915_146


class TestMacs:
    def test_vgg19(self):
        total = count_macs(named("vgg19")).total
        assert total == 398_182_400
        assert abs(total - 399e6) / 399e6 <= 0.02

    def test_vgg19_dbl(self):
        assert count_macs(named("vgg19_dbl")).total == 1_589_088_256

    def test_student_fixture(self):
        assert count_macs(vgg19_with(ST79_CHANNELS)).total == 173_499_044

    def test_conv_scales_with_output_area(self):
        arch = vgg([4], (3, 8, 8), 2)
        assert count_macs(arch).values() == [3 * 4 * 9 * 64, 4 * 64 * 2]

    def test_residual_adds_counted_as_other(self):
        arch = mini_resnet()
        report = count_macs(arch)
        assert report.other > 0
        assert "conv-5" in report.by_label()


class TestLabels:
    def test_multiple_dense_layers(self):
        labels = layer_labels(probe_arch())
        assert sorted(v for v in labels.values() if v.startswith("fc")) == ["fc-0", "fc-1"]

    @pytest.mark.parametrize("name,convs", [("vgg11", 8), ("vgg16", 13), ("vgg19", 16)])
    def test_conv_counts(self, name, convs):
        labels = layer_labels(named(name))
        assert sum(v.startswith("conv") for v in labels.values()) == convs
