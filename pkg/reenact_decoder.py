"""Semantically adaptive decoder D.

Starting from the appearance code, every module doubles the spatial size. A
module's input is concatenated with the appearance pyramid stage of the same
size, and the last `spade_on_last` modules modulate their features with the
parsing map through SPADE residual blocks.
"""

import torch
import torch.nn.functional as F
from torch import nn

from appearance_model import down_block
from reenactor_config import parsing_channels
from reenactor_errors import ConfigError, ContractError


class SPADE(nn.Module):
    """gamma(parsing) * instance_norm(x) + beta(parsing)"""

    def __init__(self, feature_channels, parsing_channels, hidden_channels=16, kernel_size=3):
        super().__init__()
        padding = kernel_size // 2
        self.feature_channels = feature_channels
        self.parsing_channels = parsing_channels
        self.param_free_norm = nn.InstanceNorm2d(feature_channels, affine=False)
        self.mlp_shared = nn.Sequential(
            nn.Conv2d(parsing_channels, hidden_channels, kernel_size, padding=padding),
            nn.ReLU(),
        )
        self.mlp_gamma = nn.Conv2d(hidden_channels, feature_channels, kernel_size, padding=padding)
        self.mlp_beta = nn.Conv2d(hidden_channels, feature_channels, kernel_size, padding=padding)
        # start close to a plain instance norm
        nn.init.ones_(self.mlp_gamma.bias)
        nn.init.zeros_(self.mlp_beta.bias)

    def modulation(self, parsing, size):
        if parsing.shape[1] != self.parsing_channels:
            raise ContractError(f"SPADE expects {self.parsing_channels} parsing channels, got {parsing.shape[1]}")
        parsing = F.interpolate(parsing, size=size, mode="nearest")
        actv = self.mlp_shared(parsing)
        return self.mlp_gamma(actv), self.mlp_beta(actv)

    def forward(self, x, parsing):
        if x.shape[1] != self.feature_channels:
            raise ContractError(f"SPADE expects {self.feature_channels} feature channels, got {x.shape[1]}")
        normalized = self.param_free_norm(x)
        gamma, beta = self.modulation(parsing, x.shape[-2:])
        return gamma * normalized + beta


def spade_modulate(spade, feature, parsing):
    return spade(feature, parsing)


class SpadeResBlock(nn.Module):
    """[SPADE -> lrelu -> conv] x 2 plus a SPADE-modulated learned shortcut"""

    def __init__(self, in_channels, out_channels, parsing_channels, hidden_channels=16):
        super().__init__()
        middle = min(in_channels, out_channels)
        self.norm_0 = SPADE(in_channels, parsing_channels, hidden_channels)
        self.conv_0 = nn.Conv2d(in_channels, middle, kernel_size=3, padding=1, bias=False)
        self.norm_1 = SPADE(middle, parsing_channels, hidden_channels)
        self.conv_1 = nn.Conv2d(middle, out_channels, kernel_size=3, padding=1)
        self.norm_s = SPADE(in_channels, parsing_channels, hidden_channels)
        self.conv_s = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)

    def forward(self, x, parsing):
        x_s = self.conv_s(self.norm_s(x, parsing))
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, parsing), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, parsing), 0.2))
        return x_s + dx


class DecoderModule(nn.Module):
    """[conv, lrelu, upsample] or [ResBlkSPADE, conv, lrelu, upsample]"""

    def __init__(self, in_channels, out_channels, parsing_channels, use_spade, hidden_channels=16):
        super().__init__()
        self.use_spade = use_spade
        if use_spade:
            self.resblock = SpadeResBlock(in_channels, out_channels, parsing_channels, hidden_channels)
            self.conv = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        else:
            self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x, parsing):
        if self.use_spade:
            x = self.resblock(x, parsing)
        x = F.leaky_relu(self.conv(x), 0.2)
        return self.upsample(x)


class ReenactDecoder(nn.Module):
    def __init__(self, decoder_channels, code_channels, pyramid_channels, parsing_channels,
                 resolution, spade_on_last=4, spade_hidden=16, use_concat=True, bottleneck_size=1):
        super().__init__()
        n_modules = len(decoder_channels)
        if bottleneck_size * 2 ** n_modules != resolution:
            raise ConfigError(f"{n_modules} decoder modules cannot take {bottleneck_size}x{bottleneck_size} to {resolution}")
        if not 0 <= spade_on_last <= n_modules:
            raise ConfigError(f"spade_on_last must lie in [0, {n_modules}]")
        if spade_on_last == n_modules and bottleneck_size == 1:
            raise ConfigError("The first decoder module sees a 1x1 map and cannot carry SPADE")
        self.resolution = resolution
        self.parsing_channels = parsing_channels
        self.use_concat = use_concat
        self.bottleneck_size = bottleneck_size
        self.spade_on_last = spade_on_last

        modules, in_ch = [], code_channels
        for i, out_ch in enumerate(decoder_channels):
            size = bottleneck_size * 2 ** i
            total_in = in_ch
            if use_concat and i > 0:
                if size not in pyramid_channels:
                    raise ConfigError(f"No appearance pyramid stage of size {size} to concatenate")
                total_in += pyramid_channels[size]
            use_spade = i >= n_modules - spade_on_last
            modules.append(DecoderModule(total_in, out_ch, parsing_channels, use_spade, spade_hidden))
            in_ch = out_ch
        self.blocks = nn.ModuleList(modules)
        self.output = nn.Sequential(nn.Conv2d(in_ch, 3, kernel_size=3, padding=1), nn.Tanh())

    def forward(self, pyramid, parsing):
        if parsing.shape[1] != self.parsing_channels:
            raise ContractError(f"Decoder expects {self.parsing_channels} parsing channels, got {parsing.shape[1]}")
        x = pyramid.code
        for i, block in enumerate(self.blocks):
            if self.use_concat and i > 0:
                stage = pyramid.stage_for(x.shape[-1])
                if stage is None:
                    raise ConfigError(f"Appearance pyramid lacks the {x.shape[-1]}x{x.shape[-1]} stage")
                x = torch.cat([x, stage], dim=1)
            x = block(x, parsing)
        return self.output(x)


def build_decoder(config, appearance):
    model = config.model
    return ReenactDecoder(
        model.decoder_channels,
        appearance.code_channels,
        appearance.pyramid_channels(),
        parsing_channels(config),
        config.data.resolution,
        spade_on_last=model.spade_on_last,
        spade_hidden=model.spade_hidden,
        use_concat=model.use_concat,
        bottleneck_size=appearance.bottleneck_size,
    )


def reenact_decode(decoder, pyramid, parsing):
    return decoder(pyramid, parsing)


class ReferenceUNet(nn.Module):
    """Same decoder widths, but with a full parsing encoder and skip connections.

    Only used to compare model sizes against ReenactDecoder.
    """

    def __init__(self, down_channels, decoder_channels, code_channels, pyramid_channels, parsing_channels, resolution):
        super().__init__()
        depth = len(down_channels)
        in_ch, blocks = parsing_channels, []
        for i, ch in enumerate(down_channels):
            blocks.append(down_block(in_ch, ch, innermost=i == depth - 1))
            in_ch = ch
        self.encoder = nn.ModuleList(blocks)
        skip_channels = {resolution // 2 ** (i + 1): ch for i, ch in enumerate(down_channels)}

        blocks, in_ch = [], code_channels
        for i, out_ch in enumerate(decoder_channels):
            size = 2 ** i
            total_in = in_ch + skip_channels.get(size, 0) + (pyramid_channels.get(size, 0) if i > 0 else 0)
            blocks.append(nn.Sequential(
                nn.Conv2d(total_in, out_ch, kernel_size=3, padding=1),
                nn.InstanceNorm2d(out_ch) if size > 1 else nn.Identity(),
                nn.LeakyReLU(0.2),
                nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
                nn.InstanceNorm2d(out_ch) if size > 1 else nn.Identity(),
                nn.LeakyReLU(0.2),
                nn.Upsample(scale_factor=2, mode="nearest"),
            ))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.output = nn.Sequential(nn.Conv2d(in_ch, 3, kernel_size=3, padding=1), nn.Tanh())

    def forward(self, pyramid, parsing):
        skips, x = {}, parsing
        for block in self.encoder:
            x = block(x)
            skips[x.shape[-1]] = x
        x = pyramid.code
        for i, block in enumerate(self.blocks):
            size = x.shape[-1]
            parts = [x]
            if size in skips:
                parts.append(skips[size])
            if i > 0 and pyramid.stage_for(size) is not None:
                parts.append(pyramid.stage_for(size))
            x = block(torch.cat(parts, dim=1))
        return self.output(x)


def build_reference_unet(config, appearance):
    model = config.model
    return ReferenceUNet(
        model.down_channels,
        model.decoder_channels,
        appearance.code_channels,
        appearance.pyramid_channels(),
        parsing_channels(config),
        config.data.resolution,
    )


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
