"""Two-branch fully convolutional counting network.

A backbone produces an F x H x W feature grid. A shared 1x1 convolution maps
it to 2P channels which are split evenly; each half goes through batch norm,
ReLU and a 1x1 convolution to C channels. The first half yields category
maps, the second density maps. There is no global pooling.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import torch
import torch.nn as nn

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HeadConfig:
    num_categories: int
    channel_factor: float = 1.5
    peak_radius: int = 1
    backbone: str = "tiny"
    input_size: int = 64

    def __post_init__(self):
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if self.channel_factor <= 0:
            raise ValueError("channel_factor must be positive")
        if self.peak_radius < 1:
            raise ValueError("peak_radius must be >= 1")

    @property
    def branch_channels(self) -> int:
        """P per branch; rounded up when channel_factor * C is fractional."""
        return math.ceil(self.channel_factor * self.num_categories - 1e-9)


class Backbone(Protocol):
    out_channels: int
    stride: int

    def __call__(self, x: torch.Tensor) -> torch.Tensor: ...


def _conv_bn_relu(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class TinyBackbone(nn.Sequential):
    """Three two-conv blocks; the first conv of the last two blocks strides.

    ``strides=(2, 2)`` gives total stride 4; ``(2, 1)`` keeps finer maps
    (stride 2) for small objects.
    """

    def __init__(self, widths=(16, 32, 64), strides=(2, 2)):
        a, b, c = widths
        s2, s3 = strides
        super().__init__(
            *_conv_bn_relu(3, a, 1), *_conv_bn_relu(a, a, 1),
            *_conv_bn_relu(a, b, s2), *_conv_bn_relu(b, b, 1),
            *_conv_bn_relu(b, c, s3), *_conv_bn_relu(c, c, 1),
        )
        self.out_channels = c
        self.stride = s2 * s3


class TorchvisionBackbone(nn.Sequential):
    """ResNet feature extractor without pooling/fc. Weights are not fetched."""

    def __init__(self, name: str = "resnet50"):
        import torchvision

        net = getattr(torchvision.models, name)(weights=None)
        super().__init__(*list(net.children())[:-2])
        self.out_channels = net.fc.in_features
        self.stride = 32


def make_backbone(name: str) -> nn.Module:
    if name == "tiny":
        return TinyBackbone()
    if name == "tiny-fine":
        return TinyBackbone(strides=(2, 1))
    if name.startswith("resnet"):
        return TorchvisionBackbone(name)
    raise ValueError(f"unknown backbone {name!r}")


class CountingHead(nn.Module):
    def __init__(self, in_channels: int, num_categories: int, branch_channels: int):
        super().__init__()
        p = branch_channels
        self.shared = nn.Conv2d(in_channels, 2 * p, 1)
        self.cls_norm = nn.BatchNorm2d(p)
        self.cls_out = nn.Conv2d(p, num_categories, 1)
        self.den_norm = nn.BatchNorm2d(p)
        self.den_out = nn.Conv2d(p, num_categories, 1)
        self.p = p
        # small initial densities keep early count sums near zero
        nn.init.normal_(self.den_out.weight, std=1e-3)
        nn.init.zeros_(self.den_out.bias)

    def forward(self, feats):
        z = self.shared(feats)
        zc, zd = z[:, : self.p], z[:, self.p:]
        cat_maps = self.cls_out(torch.relu(self.cls_norm(zc)))
        density = self.den_out(torch.relu(self.den_norm(zd)))
        return cat_maps, density


class CountingNet(nn.Module):
    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.backbone = make_backbone(config.backbone)
        self.head = CountingHead(self.backbone.out_channels, config.num_categories,
                                 config.branch_channels)

    def forward(self, images: torch.Tensor):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        return self.head(self.backbone(images))

    def head_parameters(self):
        return self.head.parameters()

    def backbone_parameters(self):
        return self.backbone.parameters()


def build_model(config: HeadConfig, seed: int | None = None) -> CountingNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return CountingNet(config)
    return CountingNet(config)


@torch.no_grad()
def forward(images: torch.Tensor, model: CountingNet):
    """Category and density maps in inference mode (frozen BN statistics)."""
    was_training = model.training
    model.eval()
    try:
        return model(images)
    finally:
        model.train(was_training)


def save_checkpoint(path, model: CountingNet, **extra) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "head_config": asdict(model.config),
        "state_dict": model.state_dict(),
        **extra,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, num_categories: int | None = None):
    """Returns ``(model, payload)``; raises on version or category mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {payload.get('version')} "
                         f"!= {CHECKPOINT_VERSION}")
    config = HeadConfig(**payload["head_config"])
    if num_categories is not None and config.num_categories != num_categories:
        raise ValueError(f"{path}: checkpoint has C={config.num_categories}, "
                         f"expected C={num_categories}")
    model = CountingNet(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload
