"""Warping branch and FusionNet.

The warp is a thin-plate spline fitted on guide -> reference landmark pairs,
so every output pixel knows where to sample the reference from. FusionNet
predicts a per-pixel mask m and the result is m * synthesized + (1 - m) * warped.
"""

from dataclasses import dataclass

import cv2
import numpy as np
import torch
from torch import nn

from landmark_layout import same_layout
from reenactor_errors import ConfigError, ContractError, DataError, WarpError

WARP_MODES = {"bilinear": cv2.INTER_LINEAR, "nearest": cv2.INTER_NEAREST}


def _tps_kernel(r_sq):
    with np.errstate(divide="ignore", invalid="ignore"):
        k = r_sq * np.log(r_sq)
    return np.nan_to_num(k, nan=0.0, posinf=0.0, neginf=0.0)


def _pairwise_sq(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return (diff ** 2).sum(axis=2)


@dataclass
class ThinPlateSpline:
    control: np.ndarray  # (n, 2) points where the spline is anchored
    weights: np.ndarray  # (n, 2) bending coefficients
    affine: np.ndarray  # (3, 2)

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        basis = np.hstack([np.ones((len(points), 1)), points])
        return _tps_kernel(_pairwise_sq(points, self.control)) @ self.weights + basis @ self.affine


def fit_tps(control, targets):
    """Thin-plate spline with tps(control[i]) == targets[i]"""
    control = np.asarray(control, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(control)
    basis = np.hstack([np.ones((n, 1)), control])
    if n < 3 or np.linalg.matrix_rank(basis) < 3:
        raise WarpError("Destination landmarks are collapsed or collinear; cannot fit a warp")
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _tps_kernel(_pairwise_sq(control, control))
    system[:n, n:] = basis
    system[n:, :n] = basis.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = targets
    solution = np.linalg.lstsq(system, rhs, rcond=None)[0]
    return ThinPlateSpline(control, solution[:n], solution[n:])


def _to_hwc(image):
    return np.ascontiguousarray(image.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32))


def landmark_warp(reference, src_landmarks, dst_landmarks, mode="bilinear"):
    """Warp a (3, H, W) reference so its src landmarks move onto dst.

    Returns the warped image and the (2, H, W) pixel displacement field mapping
    output coordinates to source coordinates.
    """
    if mode not in WARP_MODES:
        raise ConfigError(f"Unknown warp mode '{mode}'")
    if not same_layout(src_landmarks, dst_landmarks):
        raise DataError("Source and destination landmarks use different layouts")
    h, w = reference.shape[-2:]
    if h != w:
        raise ContractError("landmark_warp expects square images")
    valid = src_landmarks.valid_mask & dst_landmarks.valid_mask
    src = src_landmarks.to_pixels(w)[valid]
    dst = dst_landmarks.to_pixels(w)[valid]

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if np.array_equal(src, dst):
        mapped = grid
    else:
        mapped = fit_tps(dst, src)(grid)
    field = (mapped - grid).T.reshape(2, h, w)

    map_x = mapped[:, 0].reshape(h, w).astype(np.float32)
    map_y = mapped[:, 1].reshape(h, w).astype(np.float32)
    warped = cv2.remap(_to_hwc(reference), map_x, map_y, WARP_MODES[mode], borderMode=cv2.BORDER_REPLICATE)
    if warped.ndim == 2:
        warped = warped[:, :, None]
    warped = torch.from_numpy(warped.transpose(2, 0, 1).copy()).to(reference.dtype)
    return warped, torch.from_numpy(field.astype(np.float32))


def landmark_warp_batch(references, src_sets, dst_sets, mode="bilinear"):
    warped = [landmark_warp(r, s, d, mode)[0] for r, s, d in zip(references, src_sets, dst_sets)]
    return torch.stack(warped)


class FusionNet(nn.Module):
    """4 conv layers over [synthesized, warped, pooled parsing] with a sigmoid head"""

    def __init__(self, channels=16):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(7, channels, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 1, kernel_size=3, padding=1),
        )

    @property
    def head(self):
        return self.layers[-1]

    def set_constant_mask(self, value):
        """Force m == value (1 or 0) everywhere"""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.fill_(1e4 if value else -1e4)
        return self

    def forward(self, x):
        return torch.sigmoid(self.layers(x))


def build_fusion_net(config):
    return FusionNet(config.model.fusion_channels)


def fuse(synthesized, warped, parsing, fusion_net):
    """Blend synthesized and warped images through the predicted mask"""
    if synthesized.shape != warped.shape:
        raise ContractError(f"fuse: synthesized {tuple(synthesized.shape)} and warped {tuple(warped.shape)} differ")
    if parsing.shape[-2:] != synthesized.shape[-2:]:
        raise ContractError("fuse: parsing must match the image spatial size")
    pooled = parsing.max(dim=1, keepdim=True).values
    mask = fusion_net(torch.cat([synthesized, warped, pooled], dim=1))
    # lerp is exact at m == 0, m == 1 and when both inputs agree
    return torch.lerp(warped, synthesized, mask), mask
