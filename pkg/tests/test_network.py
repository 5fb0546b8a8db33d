import numpy as np
import pytest

from twostream.archfile import load_arch, parse_arch
from twostream.fusion import FusionSpec, Init, Method, fuse_conv
from twostream.network import (FusionPlacement, Network, TemporalHead, build_single_stream,
                               build_two_stream, count_params, layer_output_shapes,
                               parse_points, tower_shapes)
from twostream import ops

TINY = load_arch("vgg-tiny")
TINY_T = TINY.with_temporal_channels(6)


def _inputs(rng, n=2, t=1, size=24, L=3):
    return rng.normal(size=(n, t, size, size, 3)), rng.normal(size=(n, t, size, size, 2 * L))


def test_single_fc_layer_count():
    arch = parse_arch("name = fc\ninput_size = 1\nclasses = 5\nspatial_channels = 7\n"
                      "temporal_channels = 2\n[fc]\ntype = fc\nunits = classes\n")
    rep = count_params(build_single_stream(arch))
    assert rep.total == 7 * 5 + 5 and rep.layers == 1


def test_report_totals_are_sum_of_rows():
    rep = Network(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu3"),
                  materialize=False).param_report()
    assert rep.total == sum(r.params for r in rep.rows)
    assert rep.to_csv().splitlines()[0] == "layer,name,params"


def test_vgg_m_shapes():
    shapes = dict(tower_shapes(load_arch("vgg-m-2048")))
    assert shapes["conv5"][:2] == (13, 13)
    assert shapes["pool5"] == (6, 6, 512)


def test_vgg16_conv5_3():
    assert dict(tower_shapes(load_arch("vgg-16")))["conv5_3"][:2] == (14, 14)


def test_one_by_one_net_stays_one_by_one():
    arch = parse_arch("name = p\ninput_size = 1\nclasses = 2\nspatial_channels = 3\n"
                      "temporal_channels = 2\n[c1]\ntype = conv\nfilters = 4\nkernel = 1\n"
                      "[c2]\ntype = conv\nfilters = 2\nkernel = 1\n")
    assert all(s[:2] == (1, 1) for _, s in tower_shapes(arch))


def test_mixed_towers_pad_by_one():
    net = Network(load_arch("vgg-16"), load_arch("vgg-m-2048"), FusionSpec(Method.CONV),
                  FusionPlacement.at("relu5_3/relu5"), materialize=False)
    node = net.nodes[0]
    assert node.in_shape[:2] == (14, 14) and node.other_shape[:2] == (13, 13)
    assert node.pad_other == (1, 1)


def test_size_gap_beyond_one_rejected():
    with pytest.raises(ValueError, match="more than one"):
        Network(load_arch("vgg-16"), load_arch("vgg-m-2048"), FusionSpec(Method.SUM),
                FusionPlacement.at("relu4_3/relu5"), materialize=False)


def test_unknown_layer_rejected():
    with pytest.raises(ValueError, match="unknown fusion layer"):
        Network(TINY, TINY_T, placement=FusionPlacement.at("relu9"))


def test_parse_points():
    pts = parse_points("relu3:sum, relu5:conv+fc6:cat")
    assert [p.layer for p in pts] == ["relu3", "relu5", "fc6"]
    assert [p.method.value for p in pts] == ["sum", "conv", "cat"]
    assert parse_points("relu5_3/relu5")[0].other_layer == "relu5"


def test_softmax_sum_is_late_fusion(rng):
    rgb, flow = _inputs(rng)
    late = build_two_stream(TINY, TINY_T, seed=3)
    s = build_single_stream(TINY, "spatial", seed=9)
    t = build_single_stream(TINY_T, "temporal", seed=11)
    late.load_from(s)
    late.load_from(t)
    want = (ops.softmax(s.forward(rgb, None)["spatial"]).data
            + ops.softmax(t.forward(None, flow)["temporal"]).data) / 2
    np.testing.assert_allclose(late.predict(rgb, flow), want, atol=1e-14)
    at_prob = build_two_stream(TINY, TINY_T, FusionSpec(Method.SUM), FusionPlacement.at("prob"))
    at_prob.load_from(s)
    at_prob.load_from(t)
    np.testing.assert_allclose(at_prob.predict(rgb, flow), want, atol=1e-14)


def test_truncated_relu_fusion_has_one_head():
    net = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu3"))
    assert net.heads == ["fused"]
    assert not any(k.startswith("temporal.fc") for k in net.params)


def test_keep_both_towers_two_heads():
    net = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV),
                           FusionPlacement.at("relu3", keep_both_towers=True))
    assert set(net.heads) == {"fused", "temporal"}
    dual = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu3,fc5"))
    assert set(dual.heads) == {"fused", "temporal"}


def test_identity_conv_fusion_equals_sum_of_relu_maps(rng):
    rgb, flow = _inputs(rng, n=1)
    flow = flow[..., :3]
    arch = TINY.with_temporal_channels(3)
    net = build_two_stream(arch, arch, FusionSpec(Method.CONV, Init.IDENTITY),
                           FusionPlacement.at("relu3"), seed=0)
    for k in list(net.params):
        if k.startswith("temporal."):
            net.params[k].data = net.params["spatial." + k.split(".", 1)[1]].data.copy()
    # relu3 of the shared tower, run layer by layer on each input
    def relu3(x):
        h = x[:, 0]
        for name in ("conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "conv3", "relu3"):
            spec = arch.layer(name)
            if spec.kind == "conv":
                h = ops.conv2d(h, net.params[f"spatial.{name}.weight"], net.params[f"spatial.{name}.bias"],
                               spec.stride, spec.pad)
            elif spec.kind == "relu":
                h = ops.relu(h)
            else:
                h = ops.maxpool2d(h, spec.kernel, spec.stride)
        return h.data
    want = relu3(rgb) + relu3(flow)
    f = net.params["fusion.relu3.weight"]
    b = net.params["fusion.relu3.bias"]
    np.testing.assert_allclose(fuse_conv(relu3(rgb), relu3(flow), f, b).data, want, atol=1e-12)


def test_forward_probabilities_sum_to_one(rng):
    rgb, flow = _inputs(rng, n=2, t=3)
    for method, at, head in [(Method.CONV, "relu3", "3d-conv-pool"), (Method.SUM, "relu2", "3d-pool"),
                             (Method.CAT, "relu3", "2d"), (Method.MAX, "fc4", "2d")]:
        net = build_two_stream(TINY, TINY_T, FusionSpec(method), FusionPlacement.at(at), head)
        scores = net.forward(rgb, flow)
        for s in scores.values():
            p = ops.softmax(s).data
            assert p.shape == (2, TINY.classes)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_bilinear_net_hinge_head(rng):
    net = build_two_stream(TINY, TINY_T, FusionSpec(Method.BILINEAR), FusionPlacement.at("relu3"))
    assert net.head_losses == {"fused": "hinge"}
    rep = net.param_report()
    assert rep.classifier == 16 * 16 * TINY.classes + TINY.classes
    rgb, flow = _inputs(rng)
    assert net.forward(rgb, flow)["fused"].shape == (2, TINY.classes)


def test_dual_point_has_more_params_than_truncated():
    m = load_arch("vgg-m-2048")
    mt = m.with_temporal_channels(20)
    single = Network(m, mt, FusionSpec(Method.CONV), FusionPlacement.at("relu5"), materialize=False)
    dual = Network(m, mt, FusionSpec(Method.CONV), FusionPlacement.at("relu5,fc8"), materialize=False)
    assert dual.param_report().total > single.param_report().total


def test_rebuild_from_serialized_config():
    m = load_arch("vgg-m-2048")
    again = parse_arch(m.to_text())
    a = Network(m, m.with_temporal_channels(20), FusionSpec(Method.CAT), FusionPlacement.at("relu5"),
                materialize=False).param_report()
    b = Network(again, again.with_temporal_channels(20), FusionSpec(Method.CAT),
                FusionPlacement.at("relu5"), materialize=False).param_report()
    assert (a.total, a.layers, [r.params for r in a.rows]) == (b.total, b.layers, [r.params for r in b.rows])


def test_barrier_freezes_layers_up_to_fusion():
    net = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu2"))
    assert "spatial.conv2.weight" in net.frozen and "temporal.conv1.bias" in net.frozen
    assert "spatial.conv3.weight" not in net.frozen and "fusion.relu2.weight" not in net.frozen
    free = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu2"),
                            barrier=False)
    assert not free.frozen


def test_3d_conv_head_needs_conv_fusion():
    with pytest.raises(ValueError, match="conv"):
        build_two_stream(TINY, TINY_T, FusionSpec(Method.SUM), FusionPlacement.at("relu3"),
                         TemporalHead.CONV3D)


def test_layer_output_shapes_lists_fusion():
    net = build_two_stream(TINY, TINY_T, FusionSpec(Method.CAT), FusionPlacement.at("relu3"),
                           materialize=False)
    rows = {(s, n): shape for s, n, shape in layer_output_shapes(net)}
    assert rows[("fusion", "relu3")] == (6, 6, 32)


def test_state_roundtrip(rng):
    a = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu3"), seed=1)
    b = build_two_stream(TINY, TINY_T, FusionSpec(Method.CONV), FusionPlacement.at("relu3"), seed=2)
    b.load_state(a.state())
    rgb, flow = _inputs(rng)
    np.testing.assert_array_equal(a.predict(rgb, flow), b.predict(rgb, flow))
    with pytest.raises(ValueError):
        b.load_state({"spatial.conv1.weight": np.zeros(3)})


def test_input_shape_checked(rng):
    net = build_two_stream(TINY, TINY_T)
    with pytest.raises(ValueError, match="expects"):
        net.forward(np.zeros((1, 1, 20, 20, 3)), np.zeros((1, 1, 24, 24, 6)))
