"""Composite reenactment objective, multi-scale discriminator and frozen plugins.

total = reenact + lambda_app * app_recons
reenact = alpha_r * reconstruct + alpha_p * perceptual + alpha_g * gan_g + alpha_i * id
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from reenactor_config import parsing_channels
from reenactor_errors import ConfigError, ContractError, PluginError

REPORT_FIELDS = ("total", "reenact", "app_recons", "reconstruct", "perceptual", "gan_g", "gan_d", "id")


@dataclass
class LossWeights:
    lambda_app: float = 25.0
    alpha_r: float = 25.0
    alpha_p: float = 1.0
    alpha_g: float = 1.0
    alpha_i: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"Loss weight {name} must be >= 0, got {value}")

    @classmethod
    def from_config(cls, config):
        loss = config.loss
        return cls(loss.lambda_app, loss.alpha_r, loss.alpha_p, loss.alpha_g, loss.alpha_i)


@dataclass
class LossReport:
    total: torch.Tensor
    reenact: torch.Tensor
    app_recons: torch.Tensor
    reconstruct: torch.Tensor
    perceptual: torch.Tensor
    gan_g: torch.Tensor
    gan_d: torch.Tensor
    id: torch.Tensor

    def as_row(self):
        """Plain floats, one per field"""
        return {name: float(getattr(self, name)) for name in REPORT_FIELDS}

    def first_non_finite(self):
        for name in REPORT_FIELDS:
            if not math.isfinite(float(getattr(self, name))):
                return name
        return None


def _as_tensor(value):
    return value if torch.is_tensor(value) else torch.tensor(float(value))


def total_loss(parts, weights):
    """Compose a LossReport from the individual terms"""
    r = _as_tensor(parts.get("reconstruct", 0.0))
    p = _as_tensor(parts.get("perceptual", 0.0))
    g = _as_tensor(parts.get("gan_g", 0.0))
    i = _as_tensor(parts.get("id", 0.0))
    a = _as_tensor(parts.get("app_recons", 0.0))
    reenact = weights.alpha_r * r + weights.alpha_p * p + weights.alpha_g * g + weights.alpha_i * i
    total = reenact + weights.lambda_app * a
    return LossReport(total, reenact, a, r, p, g, _as_tensor(parts.get("gan_d", 0.0)), i)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_app_recons(recon, reference):
    _check_same_shape(recon, reference, "loss_app_recons")
    return (recon - reference).abs().mean()


def loss_reconstruct(reenacted, ground_truth):
    _check_same_shape(reenacted, ground_truth, "loss_reconstruct")
    return (reenacted - ground_truth).abs().mean()


# Discriminator


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels, channels=64, n_layers=3):
        super().__init__()
        kw, padw = 4, 2
        layers = [nn.Conv2d(in_channels, channels, kw, stride=2, padding=padw), nn.LeakyReLU(0.2)]
        nf = channels
        for _ in range(1, n_layers):
            nf_prev, nf = nf, min(nf * 2, 512)
            layers += [nn.Conv2d(nf_prev, nf, kw, stride=2, padding=padw, bias=False), nn.InstanceNorm2d(nf), nn.LeakyReLU(0.2)]
        nf_prev, nf = nf, min(nf * 2, 512)
        layers += [nn.Conv2d(nf_prev, nf, kw, stride=1, padding=padw, bias=False), nn.InstanceNorm2d(nf), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(nf, 1, kw, stride=1, padding=padw)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class MultiScaleDiscriminator(nn.Module):
    """S patch discriminators; scale s sees the input downsampled s times"""

    def __init__(self, in_channels, channels=64, n_layers=3, n_scales=2):
        super().__init__()
        if n_scales < 2:
            raise ConfigError("The multi-scale discriminator needs at least 2 scales")
        self.n_scales = n_scales
        self.discriminators = nn.ModuleList(PatchDiscriminator(in_channels, channels, n_layers) for _ in range(n_scales))
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def scale_inputs(self, x):
        inputs = [x]
        for _ in range(self.n_scales - 1):
            inputs.append(self.downsample(inputs[-1]))
        return inputs

    def forward(self, x):
        return [d(inp) for d, inp in zip(self.discriminators, self.scale_inputs(x))]


def build_discriminator(config):
    model = config.model
    return MultiScaleDiscriminator(3 + parsing_channels(config), model.disc_channels, model.disc_layers, model.disc_scales)


def loss_gan(discriminator, reenacted, real, parsing):
    """Least-squares conditional GAN terms, averaged over scales.

    g_term keeps the graph to the generator; d_term sees the generated image detached.
    """
    _check_same_shape(reenacted, real, "loss_gan")
    if parsing.shape[-2:] != real.shape[-2:]:
        raise ContractError("loss_gan: parsing and image spatial sizes differ")
    fake_outputs = discriminator(torch.cat([reenacted, parsing], dim=1))
    g_term = torch.stack([F.mse_loss(o, torch.ones_like(o)) for o in fake_outputs]).mean()

    real_outputs = discriminator(torch.cat([real, parsing], dim=1))
    detached_outputs = discriminator(torch.cat([reenacted.detach(), parsing], dim=1))
    d_terms = [
        0.5 * (F.mse_loss(r, torch.ones_like(r)) + F.mse_loss(f, torch.zeros_like(f)))
        for r, f in zip(real_outputs, detached_outputs)
    ]
    return g_term, torch.stack(d_terms).mean()


# Frozen plugins


def freeze(module):
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


class RandomPyramidExtractor(nn.Module):
    """Fixed randomly initialized conv pyramid, seeded for reproducibility"""

    name = "random_pyramid"

    def __init__(self, channels=(16, 32, 64), seed=1234):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        blocks, in_ch = [], 3
        for ch in channels:
            conv = nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1)
            bound = 1.0 / math.sqrt(in_ch * 9)
            with torch.no_grad():
                conv.weight.copy_(torch.empty(conv.weight.shape).uniform_(-bound, bound, generator=generator) * math.sqrt(6.0))
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.default_weights = [1.0] * len(channels)
        freeze(self)

    def forward(self, x):
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return features


class Vgg19Extractor(nn.Module):
    """ImageNet VGG19 sliced at relu1_1 .. relu5_1"""

    name = "vgg19"

    def __init__(self):
        super().__init__()
        from torchvision import models

        try:
            features = models.vgg19(weights=models.VGG19_Weights.IMAGENET1K_V1).features
        except (OSError, RuntimeError, ValueError) as e:
            raise PluginError(self.name, f"Perceptual extractor 'vgg19' is unavailable: {e}") from e
        bounds = [(0, 2), (2, 7), (7, 12), (12, 21), (21, 30)]
        self.slices = nn.ModuleList(nn.Sequential(*[features[i] for i in range(a, b)]) for a, b in bounds)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.default_weights = [1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0]
        freeze(self)

    def forward(self, x):
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        features = []
        for block in self.slices:
            x = block(x)
            features.append(x)
        return features


def get_perceptual_extractor(name, seed=1234):
    if name == "random_pyramid":
        return RandomPyramidExtractor(seed=seed)
    if name == "vgg19":
        return Vgg19Extractor()
    raise PluginError(name, f"Unknown perceptual extractor '{name}'")


def loss_perceptual(reenacted, ground_truth, extractor, layer_weights=None):
    """Layer-weighted sum of mean L1 distances between frozen feature maps"""
    if extractor is None:
        raise PluginError("perceptual", "A perceptual extractor plugin is required")
    _check_same_shape(reenacted, ground_truth, "loss_perceptual")
    weights = list(layer_weights) if layer_weights else list(extractor.default_weights)
    fake_features = extractor(reenacted)
    with torch.no_grad():
        real_features = extractor(ground_truth)
    if len(weights) != len(fake_features):
        raise ContractError(f"{len(weights)} layer weights for {len(fake_features)} extractor layers")
    return sum(w * (f - r).abs().mean() for w, f, r in zip(weights, fake_features, real_features))


class RandomProjectionEmbedder(nn.Module):
    """Average-pool to 16x16 and project with a fixed random matrix"""

    name = "random_projection"

    def __init__(self, embedding_dim=64, pooled_size=16, seed=1234):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.embedding_dim = embedding_dim
        self.pooled_size = pooled_size
        in_features = 3 * pooled_size * pooled_size
        self.projection = nn.Linear(in_features, embedding_dim, bias=False)
        with torch.no_grad():
            self.projection.weight.copy_(torch.randn(embedding_dim, in_features, generator=generator) / math.sqrt(in_features))
        freeze(self)

    def forward(self, x):
        pooled = F.adaptive_avg_pool2d(x, self.pooled_size)
        return self.projection(pooled.flatten(1))


class ToyClassifierEmbedder(nn.Module):
    name = "toy_classifier"

    def __init__(self, classifier):
        super().__init__()
        self.classifier = freeze(classifier)
        self.embedding_dim = classifier.embedding_dim

    def forward(self, x):
        return self.classifier.embed(x)


class TorchScriptEmbedder(nn.Module):
    name = "torchscript"

    def __init__(self, path, embedding_dim=None):
        super().__init__()
        try:
            self.module = freeze(torch.jit.load(str(path), map_location="cpu"))
        except (OSError, RuntimeError, ValueError) as e:
            raise PluginError(self.name, f"Identity embedder 'torchscript' could not load {path}: {e}") from e
        self.embedding_dim = embedding_dim

    def forward(self, x):
        out = self.module(x)
        if self.embedding_dim is None:
            self.embedding_dim = out.shape[-1]
        return out


def get_id_embedder(name, path="", seed=1234, classifier=None):
    """Resolve a frozen identity embedder by name"""
    if name == "random_projection":
        return RandomProjectionEmbedder(seed=seed)
    if name == "toy_classifier":
        if classifier is None and path:
            from toy_estimators import load_estimator

            classifier = load_estimator(path)
        if classifier is None:
            raise PluginError(name, "Identity embedder 'toy_classifier' needs a trained classifier or a path")
        return ToyClassifierEmbedder(classifier)
    if name == "torchscript":
        if not path:
            raise PluginError(name, "Identity embedder 'torchscript' needs loss.id_embedder_path")
        return TorchScriptEmbedder(path)
    raise PluginError(name, f"Unknown identity embedder '{name}'")


def embed(embedder, images):
    embedding = embedder(images)
    if embedder.embedding_dim is not None and embedding.shape[-1] != embedder.embedding_dim:
        raise ContractError(
            f"Embedder '{embedder.name}' declared {embedder.embedding_dim} dimensions but produced {embedding.shape[-1]}"
        )
    return embedding


def loss_id(reenacted, reference, embedder):
    """Mean L1 between frozen identity embeddings"""
    if embedder is None:
        raise PluginError("id", "An identity embedder plugin is required")
    _check_same_shape(reenacted, reference, "loss_id")
    fake = embed(embedder, reenacted)
    with torch.no_grad():
        real = embed(embedder, reference)
    return (fake - real).abs().mean()
