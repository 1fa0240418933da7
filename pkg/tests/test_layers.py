"""Layer descriptors, shape algebra, parameter naming and width rewriting."""
import pytest

from prunedistill.architectures import mini_resnet, named, vgg
from prunedistill.errors import ArchitectureError, ConfigError
from prunedistill.layers import (
    ArchitectureSpec,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ReLU,
    check_valid_arch,
    conv_widths,
    layer_from_dict,
    output_shape,
    param_shapes,
    prunable_names,
    rebuild_widths,
    scale_channels,
    trace_shapes,
    trainable_names,
)


# =============================================================================
# Shapes
# =============================================================================


class TestOutputShape:
    def test_same_padding_conv(self):
        assert output_shape(Conv2d(3, 8, 3, 3, pad=1), (3, 32, 32)) == (8, 32, 32)

    def test_strided_conv(self):
        assert output_shape(Conv2d(3, 8, 3, 3, stride=2, pad=1), (3, 32, 32)) == (8, 16, 16)

    def test_pool_and_flatten(self):
        assert output_shape(MaxPool(2, 2), (8, 5, 5)) == (8, 2, 2)
        assert output_shape(Flatten(), (8, 2, 2)) == (32,)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ArchitectureError):
            output_shape(Conv2d(4, 8), (3, 8, 8))

    def test_collapsing_conv(self):
        with pytest.raises(ArchitectureError):
            output_shape(Conv2d(3, 8, 5, 5), (3, 2, 2))

    def test_dense_fan_in_mismatch_rejected(self):
        arch = ArchitectureSpec((3, 8, 8), 3, (Conv2d(3, 4, pad=1), Flatten(), Dense(100, 3)))
        with pytest.raises(ArchitectureError):
            check_valid_arch(arch)

    def test_logits_must_match_classes(self):
        arch = ArchitectureSpec((3, 8, 8), 5, (Flatten(), Dense(192, 3)))
        with pytest.raises(ArchitectureError):
            check_valid_arch(arch)

    def test_vgg19_ends_in_one_by_one(self):
        rows = trace_shapes(named("vgg19"))
        flatten = [out for _, layer, _, out in rows if isinstance(layer, Flatten)]
        assert flatten == [(512,)]


# =============================================================================
# Serialization of descriptors
# =============================================================================


class TestArchitectureDict:
    @pytest.mark.parametrize("name", ["vgg19", "mini_vgg", "mini_resnet"])
    def test_dict_roundtrip(self, name):
        arch = named(name) if name == "vgg19" else named(name, (3, 16, 16), 10)
        assert ArchitectureSpec.from_dict(arch.to_dict()) == arch

    def test_unknown_layer_kind(self):
        with pytest.raises(ConfigError):
            layer_from_dict({"kind": "attention"})

    def test_unknown_layer_field(self):
        with pytest.raises(ConfigError):
            layer_from_dict({"kind": "conv2d", "in_ch": 3, "out_ch": 4, "dilation": 2})

    def test_save_writes_json(self, tmp_path, tiny_arch):
        path = tmp_path / "tiny.json"
        tiny_arch.save(path)
        assert '"kind": "conv2d"' in path.read_text()


# =============================================================================
# Parameter naming
# =============================================================================


class TestParamNames:
    def test_vgg_names(self):
        arch = named("mini_vgg", (3, 16, 16), 10)
        assert prunable_names(arch) == ["0.weight", "4.weight", "8.weight", "13.weight"]
        shapes = param_shapes(arch)
        # conv followed by BN carries no bias; the classifier does
        assert "0.bias" not in shapes
        assert shapes["13.bias"] == (10,)
        assert shapes["1.running_var"] == (16,)

    def test_resnet_names(self):
        arch = mini_resnet()
        assert prunable_names(arch) == [
            "0.weight",
            "3.body.0.weight",
            "3.body.3.weight",
            "5.body.0.weight",
            "5.body.3.weight",
            "5.proj.weight",
            "9.weight",
        ]
        assert param_shapes(arch)["5.proj.weight"] == (32, 16, 1, 1)

    def test_running_stats_not_trainable(self, tiny_arch):
        names = trainable_names(tiny_arch)
        assert not any(n.endswith(("running_mean", "running_var")) for n in names)
        assert "1.gamma" in names and "1.beta" in names


# =============================================================================
# Width rewriting
# =============================================================================


class TestRebuildWidths:
    def test_identity(self):
        arch = named("vgg19")

        def keep(_prefix, layer, _in):
            return layer.out_ch if isinstance(layer, Conv2d) else layer.out_features

        assert rebuild_widths(arch, keep).layers == arch.layers

    def test_halving_follows_through_bn_and_classifier(self, tiny_arch):
        half = rebuild_widths(tiny_arch, lambda _p, layer, _in: max(1, layer.out_ch // 2), name="half")
        assert conv_widths(half) == [2, 4]
        bns = [layer for layer in half.layers if isinstance(layer, BatchNorm)]
        assert [bn.ch for bn in bns] == [2, 4]
        dense = half.layers[-1]
        assert (dense.in_features, dense.out_features) == (16, 3)

    def test_scale_doubles_hidden_widths(self):
        dbl = scale_channels(named("vgg19"), 2.0)
        assert conv_widths(dbl)[0] == 128 and conv_widths(dbl)[-1] == 1024
        assert dbl.layers[0].in_ch == 3
        assert dbl.layers[-1] == Dense(1024, 100)
        assert dbl.name == "vgg19x2"

    def test_residual_projection_added_when_widths_diverge(self):
        arch = mini_resnet(widths=(8, 8))
        assert arch.layers[3].projection is None
        wider = rebuild_widths(arch, lambda p, layer, _in: 12 if p.startswith("3.body.3") else layer.out_ch)
        assert wider.layers[3].projection == Conv2d(8, 12, 1, 1, stride=1, has_bias=False)

    def test_negative_scale(self, tiny_arch):
        with pytest.raises(ConfigError):
            scale_channels(tiny_arch, 0.0)

    def test_relu_passthrough(self):
        arch = vgg([4], (1, 4, 4), 2, batch_norm=False)
        assert isinstance(arch.layers[1], ReLU)
        assert arch.layers[0].has_bias
