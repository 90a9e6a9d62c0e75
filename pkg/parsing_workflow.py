"""Shape representation: multi-channel face parsing maps rendered from landmarks.

The landmark rasterizer stands in for a pretrained boundary network; any other
backend must honour the same (K, H, W) contract and stays frozen.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import seaborn as sns
import torch
from PIL import Image

from action_log import log_warning
from landmark_layout import LandmarkSet
from reenactor_errors import ContractError, DataError, PluginError

VALID_CHANNEL_COUNTS = (15, 17)


@dataclass
class ParsingMap:
    channels: torch.Tensor  # (K, H, W) in [0, 1]
    names: list
    warnings: list = field(default_factory=list)

    @property
    def n_channels(self):
        return self.channels.shape[0]

    def channel(self, name):
        return self.channels[self.names.index(name)]


@dataclass
class Palette:
    names: list
    colors: np.ndarray  # (K, 3) uint8
    background: tuple = (0, 0, 0)


@dataclass
class ColorizedParsing:
    pixels: np.ndarray  # (3, H, W) uint8
    palette: Palette


def check_parsing(channels, resolution=None):
    """Validate the (K, H, W) contract of a parsing tensor"""
    if channels.dim() != 3 or channels.shape[0] not in VALID_CHANNEL_COUNTS:
        raise ContractError(f"Parsing map must be (K, H, W) with K in {VALID_CHANNEL_COUNTS}, got {tuple(channels.shape)}")
    if resolution is not None and tuple(channels.shape[1:]) != (resolution, resolution):
        raise ContractError(f"Parsing map must be {resolution}x{resolution}, got {tuple(channels.shape[1:])}")
    if not torch.isfinite(channels).all() or channels.min() < 0 or channels.max() > 1:
        raise ContractError("Parsing map values must be finite and lie in [0, 1]")
    return channels


def _pixel_grid(resolution):
    coords = np.arange(resolution, dtype=np.float64)
    xs, ys = np.meshgrid(coords, coords)
    return xs, ys


def _polyline_distance_sq(xs, ys, points):
    """Squared distance of every pixel centre to a polyline through `points`"""
    if len(points) == 1:
        return (xs - points[0][0]) ** 2 + (ys - points[0][1]) ** 2
    best = np.full(xs.shape, np.inf)
    for a, b in zip(points[:-1], points[1:]):
        seg = b - a
        length_sq = float(seg @ seg)
        if length_sq == 0.0:
            t = np.zeros(xs.shape)
        else:
            t = ((xs - a[0]) * seg[0] + (ys - a[1]) * seg[1]) / length_sq
            t = np.clip(t, 0.0, 1.0)
        dx = xs - (a[0] + t * seg[0])
        dy = ys - (a[1] + t * seg[1])
        best = np.minimum(best, dx * dx + dy * dy)
    return best


def render_parsing(landmarks, resolution, stroke_sigma=None, use_gaze=False):
    """Rasterize every part polyline into its own Gaussian-stroke channel"""
    if stroke_sigma is None:
        stroke_sigma = resolution / 64.0
    if stroke_sigma <= 0:
        raise DataError("stroke_sigma must be positive")
    parts = landmarks.layout.parts_for(use_gaze)
    xs, ys = _pixel_grid(resolution)
    pixels = landmarks.to_pixels(resolution)
    valid = landmarks.valid_mask
    denom = 2.0 * stroke_sigma * stroke_sigma

    channels = np.zeros((len(parts), resolution, resolution), dtype=np.float64)
    warnings = []
    for k, part in enumerate(parts):
        idx = [i for i in part.indices if valid[i]]
        min_points = 1 if part.kind == "point" else 2
        if len(idx) < min_points:
            warnings.append(part.name)
            continue
        dist_sq = _polyline_distance_sq(xs, ys, pixels[idx])
        channels[k] = np.exp(-dist_sq / denom)

    if warnings:
        log_warning(f"Parsing parts with too few landmarks rendered empty: {', '.join(warnings)}")
    tensor = torch.from_numpy(channels.astype(np.float32))
    return ParsingMap(tensor, [p.name for p in parts], warnings)


def render_parsing_batch(landmark_sets, resolution, stroke_sigma=None, use_gaze=False):
    maps = [render_parsing(lm, resolution, stroke_sigma, use_gaze) for lm in landmark_sets]
    return torch.stack([m.channels for m in maps])


def default_palette(names):
    """Deterministic distinct colour per part"""
    colors = np.array(sns.color_palette("husl", len(names))) * 255.0
    return Palette(list(names), np.round(colors).astype(np.uint8))


def read_palette(path):
    """Read a palette file of K lines 'name r g b'"""
    names, colors = [], []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DataError(f"{path}:{line_no}: expected 'name r g b'")
        names.append(fields[0])
        colors.append([int(v) for v in fields[1:]])
    return Palette(names, np.array(colors, dtype=np.uint8))


def write_palette(path, palette):
    lines = [f"{n} {c[0]} {c[1]} {c[2]}" for n, c in zip(palette.names, palette.colors)]
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def colorize(parsing, palette, threshold=0.1):
    """Colour each pixel by its strongest channel; background below threshold"""
    channels = parsing.channels.detach().cpu().numpy()
    if len(palette.names) != channels.shape[0]:
        raise ContractError(f"Palette has {len(palette.names)} colours for {channels.shape[0]} channels")
    strongest = channels.argmax(axis=0)
    peak = channels.max(axis=0)
    pixels = palette.colors[strongest]  # (H, W, 3)
    pixels[peak <= threshold] = np.array(palette.background, dtype=np.uint8)
    return ColorizedParsing(np.ascontiguousarray(pixels.transpose(2, 0, 1)), palette)


def save_colorized_png(colorized, path):
    Image.fromarray(colorized.pixels.transpose(1, 2, 0)).save(path)
    return path


# Shape backends


class LandmarkRasterizer:
    """Default shape encoder; has no parameters, so it is trivially frozen."""

    name = "landmark_rasterizer"

    def __init__(self, resolution, stroke_sigma=None, use_gaze=False):
        self.resolution = resolution
        self.stroke_sigma = stroke_sigma
        self.use_gaze = use_gaze

    def parameters(self):
        return []

    def __call__(self, item):
        landmarks = getattr(item, "landmarks", item)
        if not isinstance(landmarks, LandmarkSet):
            raise DataError("landmark_rasterizer needs landmarks; got an image without them")
        return render_parsing(landmarks, self.resolution, self.stroke_sigma, self.use_gaze)


class ExternalShapeModel:
    """Adapter over a pretrained image->parsing network, frozen on construction."""

    name = "external_model"

    def __init__(self, module, resolution, names):
        self.module = module.eval()
        for param in self.module.parameters():
            param.requires_grad_(False)
        self.resolution = resolution
        self.names = list(names)

    def parameters(self):
        return list(self.module.parameters())

    def __call__(self, item):
        image = getattr(item, "image", item)
        if not torch.is_tensor(image):
            raise DataError("external_model needs an image tensor")
        with torch.no_grad():
            out = self.module(image.unsqueeze(0) if image.dim() == 3 else image)
        out = out[0] if out.dim() == 4 else out
        if out.shape[0] != len(self.names):
            raise ContractError(f"external_model returned {out.shape[0]} channels, expected {len(self.names)}")
        check_parsing(out, self.resolution)
        return ParsingMap(out.detach(), list(self.names))


def get_shape_backend(name, resolution, stroke_sigma=None, use_gaze=False, layout=None, module=None, model_path=""):
    """Resolve a shape backend by name"""
    if name == "landmark_rasterizer":
        return LandmarkRasterizer(resolution, stroke_sigma, use_gaze)
    if name == "external_model":
        if module is None and model_path:
            try:
                module = torch.jit.load(model_path, map_location="cpu")
            except (OSError, RuntimeError) as e:
                raise PluginError(name, f"Shape backend 'external_model' could not load {model_path}: {e}") from e
        if module is None:
            raise PluginError(name, "Shape backend 'external_model' has no model configured")
        names = [p.name for p in layout.parts_for(use_gaze)] if layout else [f"part_{i}" for i in range(17 if use_gaze else 15)]
        return ExternalShapeModel(module, resolution, names)
    raise PluginError(name, f"Unknown shape backend '{name}'")


def shape_encode(item, backend):
    """Encode a sample, landmark set or image into a ParsingMap"""
    if backend is None:
        raise PluginError("none", "No shape backend given")
    return backend(item)


@dataclass
class ShapeInput:
    """A pose guide as a backend sees it: landmarks for the rasterizer, the image for a network"""

    landmarks: LandmarkSet = None
    image: torch.Tensor = None


def encode_guides(backend, landmark_sets, images=None):
    """(N, K, H, W) guide parsings through the configured backend"""
    if images is None:
        images = [None] * len(landmark_sets)
    if len(images) != len(landmark_sets):
        raise DataError(f"{len(landmark_sets)} guide landmark sets but {len(images)} guide images")
    maps = [shape_encode(ShapeInput(lm, img), backend) for lm, img in zip(landmark_sets, images)]
    return torch.stack([m.channels for m in maps])


def backend_checksum(backend):
    """Digest of the backend's parameters, used to prove it stays frozen"""
    digest = hashlib.sha1()
    for param in backend.parameters():
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
