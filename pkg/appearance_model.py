"""Appearance auto-encoder F.

The encoder halves the reference down to a 1x1 code. The decoder reconstructs
the reference, and its intermediate stages (coarse to fine, sizes
2..resolution/2) form the appearance pyramid fed to the reenactment decoder.
"""

from dataclasses import dataclass, field

import torch
from torch import nn

from reenactor_errors import ConfigError, ContractError


@dataclass
class AppearancePyramid:
    code: torch.Tensor  # (N, C0, b, b)
    features: list = field(default_factory=list)  # coarse -> fine

    @property
    def sizes(self):
        return [f.shape[-1] for f in self.features]

    def stage_for(self, size):
        for feature in self.features:
            if feature.shape[-1] == size:
                return feature
        return None


def down_block(in_channels, out_channels, innermost=False):
    # instance statistics are undefined on a 1x1 map; elsewhere the norm cancels a conv bias
    layers = [nn.Conv2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1, bias=innermost)]
    if not innermost:
        layers.append(nn.InstanceNorm2d(out_channels))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def up_block(in_channels, out_channels):
    return nn.Sequential(
        nn.ConvTranspose2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1, bias=False),
        nn.InstanceNorm2d(out_channels),
        nn.ReLU(),
    )


class AppearanceAutoEncoder(nn.Module):
    def __init__(self, down_channels, up_channels, resolution):
        super().__init__()
        depth = len(down_channels)
        if resolution % (2 ** depth) != 0:
            raise ConfigError(f"resolution {resolution} is not divisible by 2^{depth}")
        if len(up_channels) != depth - 1:
            raise ConfigError(f"Appearance decoder needs {depth - 1} up blocks, got {len(up_channels)}")
        self.resolution = resolution
        self.down_channels = list(down_channels)
        self.up_channels = list(up_channels)
        self.bottleneck_size = resolution // (2 ** depth)

        blocks, in_ch = [], 3
        for i, ch in enumerate(down_channels):
            innermost = i == depth - 1 and self.bottleneck_size == 1
            blocks.append(down_block(in_ch, ch, innermost))
            in_ch = ch
        self.encoder = nn.ModuleList(blocks)

        blocks = []
        for ch in up_channels:
            blocks.append(up_block(in_ch, ch))
            in_ch = ch
        self.decoder = nn.ModuleList(blocks)
        self.output = nn.Sequential(
            nn.ConvTranspose2d(in_ch, 3, kernel_size=4, stride=2, padding=1),
            nn.Tanh(),
        )

    @property
    def code_channels(self):
        return self.down_channels[-1]

    def pyramid_channels(self):
        """spatial size -> channel count of the matching pyramid stage"""
        return {self.bottleneck_size * 2 ** (j + 1): ch for j, ch in enumerate(self.up_channels)}

    def encode(self, reference):
        if tuple(reference.shape[-3:]) != (3, self.resolution, self.resolution):
            raise ContractError(f"Reference must be (N, 3, {self.resolution}, {self.resolution}), got {tuple(reference.shape)}")
        x = reference
        for block in self.encoder:
            x = block(x)
        return x

    def decode(self, code):
        expected = (self.code_channels, self.bottleneck_size, self.bottleneck_size)
        if tuple(code.shape[-3:]) != expected:
            raise ContractError(f"Appearance code must be {expected}, got {tuple(code.shape[-3:])}")
        x, features = code, []
        for block in self.decoder:
            x = block(x)
            features.append(x)
        return self.output(x), AppearancePyramid(code, features)

    def project(self, stage):
        """Output head applied to the finest pyramid stage"""
        return self.output(stage)

    def forward(self, reference):
        return self.decode(self.encode(reference))


def build_appearance_model(config):
    model = config.model
    return AppearanceAutoEncoder(model.down_channels, model.up_channels, config.data.resolution)


def appearance_encode(model, reference):
    return model.encode(reference)


def appearance_decode(model, code):
    return model.decode(code)
