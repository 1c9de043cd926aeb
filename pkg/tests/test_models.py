import time

import pytest
import torch

from pseudoedge.models import (NetworkSpec, build_attention_network, build_edge_network, build_network,
                               build_segmentation_network, capacity_ladder, default_spec)


def conv_stack_count(depth, width, cin=3, cout=2):
    """Weights + biases of every 3x3 conv, plus BN scale/shift on the hidden layers."""
    n = 9 * cin * width + width
    n += (depth - 2) * (9 * width * width + width)
    n += 9 * width * cout + cout
    return n + 2 * width * (depth - 1)


def x64(n=1, side=64):
    return torch.rand(n, 3, side, side, generator=torch.Generator().manual_seed(0))


@pytest.fixture(scope="module")
def tiny():
    return {role: build_network(default_spec(role, "tiny"), seed=0) for role in ("segmentation", "edge", "attention")}


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(role="edge", family="conv_stack", depth=3, base_channels=64),
                                    dict(role="segmentation", family="conv_stack", depth=4, base_channels=64),
                                    dict(role="edge", family="pyramid_encoder_decoder", depth=101, base_channels=64),
                                    dict(role="other", family="conv_stack", depth=4, base_channels=64),
                                    dict(role="edge", family="conv_stack", depth=4, base_channels=0),
                                    dict(role="edge", family="conv_stack", depth=4, base_channels=8, preset="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            NetworkSpec(**kw)

    def test_role_mismatch(self):
        with pytest.raises(ValueError):
            build_segmentation_network(default_spec("attention", "tiny"))
        with pytest.raises(ValueError):
            build_edge_network(default_spec("segmentation", "tiny"))
        with pytest.raises(ValueError):
            build_attention_network(default_spec("edge", "tiny"))

    def test_paper_defaults(self):
        f, g, h = (default_spec(r) for r in ("segmentation", "edge", "attention"))
        assert (f.family, f.depth) == ("pyramid_encoder_decoder", 50)
        assert (g.family, g.depth, g.base_channels) == ("conv_stack", 4, 64)
        assert (h.family, h.depth) == ("pyramid_encoder_decoder", 18)

    def test_names(self):
        assert default_spec("edge").name == "conv4"
        assert capacity_ladder("tiny")[4].name == "pyramid18-tiny"


class TestContracts:
    @pytest.mark.parametrize("role", ["segmentation", "attention"])
    def test_sigmoid_roles(self, tiny, role):
        out = tiny[role](x64(2))
        assert out.shape == (2, 1, 64, 64)
        assert ((out > 0) & (out < 1)).all()

    def test_edge_role(self, tiny):
        out = tiny["edge"](x64(2))
        assert out.shape == (2, 2, 64, 64)
        assert torch.isfinite(out).all()
        assert (out < 0).any()

    @pytest.mark.parametrize("role", ["segmentation", "edge", "attention"])
    def test_odd_sizes_are_cropped_back(self, tiny, role):
        out = tiny[role](torch.rand(1, 3, 37, 50))
        assert out.shape[-2:] == (37, 50)

    def test_fresh_network_output_varies(self, tiny):
        tiny["segmentation"].eval()
        assert tiny["segmentation"](x64()).var().item() > 0

    def test_constant_input_gives_constant_interior(self):
        net = build_network(NetworkSpec("edge", "conv_stack", 4, 64), seed=0).eval()
        out = net(torch.zeros(1, 3, 32, 32))
        # zero padding touches a 4-pixel border; the interior sees only the constant
        inner = out[..., 4:-4, 4:-4]
        assert torch.equal(inner, inner[..., :1, :1].expand_as(inner))

    def test_tiny_forward_under_one_second(self):
        t = time.perf_counter()
        net = build_attention_network(default_spec("attention", "tiny"), seed=0).eval()
        with torch.no_grad():
            net(x64())
        assert time.perf_counter() - t < 1.0


class TestParameterCounts:
    def test_conv4_width64_matches_analytic(self):
        net = build_edge_network(NetworkSpec("edge", "conv_stack", 4, 64))
        expected = (3 * 3 * 3 * 64 + 64) + 2 * (3 * 3 * 64 * 64 + 64) + (3 * 3 * 64 * 2 + 2) + 3 * 2 * 64
        assert expected == conv_stack_count(4, 64) == 77186
        assert net.parameter_count == expected

    @pytest.mark.parametrize("spec", capacity_ladder("tiny")[:4] + capacity_ladder("paper")[:4])
    def test_every_conv_stack(self, spec):
        assert build_network(spec).parameter_count == conv_stack_count(spec.depth, spec.base_channels)

    @pytest.mark.parametrize("preset", ["tiny", "paper"])
    def test_ladder(self, preset):
        ladder = capacity_ladder(preset)
        assert len(ladder) == 7
        assert [s.depth for s in ladder] == [2, 4, 6, 8, 18, 34, 50]
        assert all(s.role == "edge" for s in ladder)
        assert ladder[1] == default_spec("edge", preset)
        counts = [build_network(s).parameter_count for s in ladder]
        assert counts[:4] == sorted(set(counts[:4]))
        assert counts[4:] == sorted(set(counts[4:]))
        # every conv stack is smaller than the smallest pyramid
        assert max(counts[:4]) < counts[4]

    def test_tiny_smaller_than_paper(self):
        for role in ("segmentation", "attention"):
            assert (build_network(default_spec(role, "tiny")).parameter_count
                    < build_network(default_spec(role, "paper")).parameter_count)

    def test_attention_smaller_than_paper_segmentation(self):
        assert (build_network(default_spec("attention")).parameter_count
                < build_network(default_spec("segmentation")).parameter_count)


def test_same_seed_same_parameters():
    spec = default_spec("segmentation", "tiny")
    a = build_network(spec, seed=3).state_dict()
    b = build_network(spec, seed=3).state_dict()
    c = build_network(spec, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_init_zeroes_biases():
    net = build_network(default_spec("edge"), seed=0)
    for m in net.modules():
        if isinstance(m, torch.nn.Conv2d) and m.bias is not None:
            assert torch.count_nonzero(m.bias) == 0
