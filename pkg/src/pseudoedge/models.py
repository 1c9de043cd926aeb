"""Segmentation network f, edge network g and attention module h.

Two presets exist. ``paper`` uses torchvision ResNet backbones under a
feature-pyramid decoder; ``tiny`` uses a three-level residual encoder that
trains on a CPU in seconds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet
from torchvision.models.resnet import BasicBlock, Bottleneck

ROLES = ("segmentation", "edge", "attention")
FAMILIES = ("conv_stack", "pyramid_encoder_decoder")
PRESETS = ("paper", "tiny")
CONV_DEPTHS = (2, 4, 6, 8)
PYRAMID_LABELS = (18, 34, 50)

# blocks per stage; the tiny encoder keeps the first three stages
_STAGES = {18: (BasicBlock, (2, 2, 2, 2)),
           34: (BasicBlock, (3, 4, 6, 3)),
           50: (Bottleneck, (3, 4, 6, 3))}
_TORCHVISION = {18: resnet.resnet18, 34: resnet.resnet34, 50: resnet.resnet50}


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    family: str
    depth: int
    base_channels: int
    preset: str = "paper"
    decoder_channels: int = 128
    pretrained: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.family == "conv_stack":
            if self.depth not in CONV_DEPTHS:
                raise ValueError(f"conv_stack depth must be one of {CONV_DEPTHS}, got {self.depth}")
            if self.role != "edge":
                raise ValueError("conv_stack is only used for the edge network")
        elif self.depth not in PYRAMID_LABELS:
            raise ValueError(f"pyramid label must be one of {PYRAMID_LABELS}, got {self.depth}")
        if self.base_channels < 1 or self.decoder_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.pretrained and (self.preset != "paper" or self.family != "pyramid_encoder_decoder"):
            raise ValueError("pretrained weights exist only for paper-preset pyramid backbones")

    @property
    def out_channels(self) -> int:
        return 2 if self.role == "edge" else 1

    @property
    def name(self) -> str:
        if self.family == "conv_stack":
            return f"conv{self.depth}"
        return f"pyramid{self.depth}" + ("-tiny" if self.preset == "tiny" else "")

    def to_dict(self) -> dict:
        return asdict(self)


# tiny preset widths: 16-channel encoder base and decoder, 32-wide conv stacks
TINY_BASE = 16
TINY_DECODER = 16
TINY_CONV_WIDTH = 32
# the stem halves resolution, as in the full-size backbones, so no stage runs at full resolution
TINY_STEM_STRIDE = 2


def _conv_spec(depth, preset):
    return NetworkSpec("edge", "conv_stack", depth, TINY_CONV_WIDTH if preset == "tiny" else 64, preset)


def _pyramid_spec(role, label, preset):
    if preset == "tiny":
        return NetworkSpec(role, "pyramid_encoder_decoder", label, TINY_BASE, "tiny", decoder_channels=TINY_DECODER)
    return NetworkSpec(role, "pyramid_encoder_decoder", label, 64, "paper")


def default_spec(role: str, preset: str = "paper") -> NetworkSpec:
    """The default network for each role: FPN-ResNet50 f, 4-layer g, FPN-ResNet18 h.

    The tiny preset uses the 18-label residual family for both f and h.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    if role == "edge":
        return _conv_spec(4, preset)
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    label = 50 if role == "segmentation" and preset == "paper" else 18
    return _pyramid_spec(role, label, preset)


def capacity_ladder(preset: str = "paper") -> list[NetworkSpec]:
    """Edge-network specs from smallest to largest: four conv stacks, three pyramids."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return [_conv_spec(d, preset) for d in CONV_DEPTHS] + [_pyramid_spec("edge", d, preset) for d in PYRAMID_LABELS]


def _conv_bn_relu(cin, cout, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ConvStack(nn.Module):
    """``depth`` 3x3 convolutions; all but the last followed by BN + ReLU."""

    def __init__(self, in_channels, out_channels, depth, width):
        super().__init__()
        layers = []
        cin = in_channels
        for _ in range(depth - 1):
            layers += [nn.Conv2d(cin, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
            cin = width
        layers.append(nn.Conv2d(cin, out_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class TinyEncoder(nn.Module):
    """Stem, then three residual stages at strides ``stem_stride`` x (1, 2, 4)."""

    def __init__(self, in_channels, label, base, stem_stride=TINY_STEM_STRIDE):
        super().__init__()
        block, counts = _STAGES[label]
        self.stem = nn.Sequential(nn.Conv2d(in_channels, base, 3, stride=stem_stride, padding=1, bias=False),
                                  nn.BatchNorm2d(base), nn.ReLU(inplace=True))
        self.inplanes = base
        self.stages = nn.ModuleList()
        self.channels = []
        for i, n in enumerate(counts[:3]):
            planes = base * 2 ** i
            self.stages.append(self._stage(block, planes, n, stride=1 if i == 0 else 2))
            self.channels.append(planes * block.expansion)
        self.stride = 4 * stem_stride
        self.first_stride = stem_stride

    def _stage(self, block, planes, blocks, stride):
        downsample = None
        if stride != 1 or self.inplanes != planes * block.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * block.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes * block.expansion))
        layers = [block(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes * block.expansion
        layers += [block(self.inplanes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNetEncoder(nn.Module):
    """torchvision ResNet trunk returning the four stage outputs (strides 4..32)."""

    def __init__(self, in_channels, label, pretrained=False):
        super().__init__()
        weights = "DEFAULT" if pretrained else None
        net = _TORCHVISION[label](weights=weights)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        expansion = _STAGES[label][0].expansion
        self.channels = [64 * 2 ** i * expansion for i in range(4)]
        self.stride = 32
        self.first_stride = 4

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PyramidNet(nn.Module):
    """Encoder plus a top-down pyramid decoder.

    Laterals are projected to ``decoder_channels``, merged top-down by
    bilinear upsampling and summation, smoothed, brought to the finest
    level and summed again before a small head predicts the output map.
    """

    def __init__(self, spec: NetworkSpec, in_channels=3):
        super().__init__()
        if spec.preset == "tiny":
            self.encoder = TinyEncoder(in_channels, spec.depth, spec.base_channels)
        else:
            self.encoder = ResNetEncoder(in_channels, spec.depth, spec.pretrained)
        d = spec.decoder_channels
        self.laterals = nn.ModuleList([nn.Conv2d(c, d, 1) for c in self.encoder.channels])
        self.smooth = nn.ModuleList([_conv_bn_relu(d, d) for _ in self.encoder.channels])
        self.head = nn.Sequential(_conv_bn_relu(d, d), nn.Conv2d(d, spec.out_channels, 1))
        self.stride = self.encoder.stride

    def forward(self, x):
        size = x.shape[-2:]
        feats = self.encoder(x)
        top = self.laterals[-1](feats[-1])
        merged = [top]
        for lat, f in zip(reversed(self.laterals[:-1]), reversed(feats[:-1])):
            top = lat(f) + F.interpolate(top, size=f.shape[-2:], mode="bilinear", align_corners=False)
            merged.append(top)
        merged.reverse()
        finest = merged[0].shape[-2:]
        fused = None
        for sm, m in zip(self.smooth, merged):
            m = sm(m)
            if m.shape[-2:] != finest:
                m = F.interpolate(m, size=finest, mode="bilinear", align_corners=False)
            fused = m if fused is None else fused + m
        out = self.head(fused)
        if out.shape[-2:] != size:
            out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
        return out


class Network(nn.Module):
    """Pads to the encoder stride, runs the body, crops back, applies the output activation."""

    def __init__(self, spec: NetworkSpec, in_channels=3):
        super().__init__()
        self.spec = spec
        if spec.family == "conv_stack":
            self.body = ConvStack(in_channels, spec.out_channels, spec.depth, spec.base_channels)
            self.stride = 1
        else:
            self.body = PyramidNet(spec, in_channels)
            self.stride = self.body.stride

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x):
        h, w = x.shape[-2:]
        ph = -h % self.stride
        pw = -w % self.stride
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        out = self.body(x)[..., :h, :w]
        if self.spec.role == "edge":
            return out
        return torch.sigmoid(out)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _build(spec: NetworkSpec, role: str, seed: int | None) -> Network:
    if spec.role != role:
        raise ValueError(f"expected a {role} spec, got role {spec.role!r}")
    if seed is not None:
        torch.manual_seed(seed)
    net = Network(spec)
    if not spec.pretrained:
        init_weights(net)
    return net


def build_segmentation_network(spec: NetworkSpec, seed: int | None = None) -> Network:
    if spec.family != "pyramid_encoder_decoder":
        raise ValueError("the segmentation network is a pyramid encoder-decoder")
    return _build(spec, "segmentation", seed)


def build_edge_network(spec: NetworkSpec, seed: int | None = None) -> Network:
    return _build(spec, "edge", seed)


def build_attention_network(spec: NetworkSpec, seed: int | None = None) -> Network:
    if spec.family != "pyramid_encoder_decoder":
        raise ValueError("the attention module is a pyramid encoder-decoder")
    return _build(spec, "attention", seed)


BUILDERS = {"segmentation": build_segmentation_network,
            "edge": build_edge_network,
            "attention": build_attention_network}


def build_network(spec: NetworkSpec, seed: int | None = None) -> Network:
    return BUILDERS[spec.role](spec, seed)
