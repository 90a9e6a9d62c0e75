import numpy as np
import pytest
import torch
from torch import nn

from appearance_model import build_appearance_model
from eval_workflow import reenact_faces
from face_dataset_workflow import load_samples
from landmark_layout import LandmarkSet
from parsing_workflow import render_parsing_batch
from reenact_decoder import (
    SPADE,
    ReenactDecoder,
    build_decoder,
    build_reference_unet,
    count_parameters,
    reenact_decode,
    spade_modulate,
)
from reenactor_config import desk_config
from reenactor_errors import ConfigError, ContractError
from synthetic_faces import HeadPose, face_landmarks


@pytest.fixture
def models():
    config = desk_config(32)
    appearance = build_appearance_model(config)
    return config, appearance, build_decoder(config, appearance)


def _zero_modulation(spade, gamma_bias=0.0):
    with torch.no_grad():
        for conv in (spade.mlp_gamma, spade.mlp_beta):
            conv.weight.zero_()
            conv.bias.zero_()
        spade.mlp_gamma.bias.fill_(gamma_bias)
    return spade


def test_zero_modulation_gives_zero():
    """gamma = beta = 0 wipes the feature out."""
    spade = _zero_modulation(SPADE(4, 15))
    out = spade_modulate(spade, torch.randn(2, 4, 8, 8), torch.rand(2, 15, 8, 8))
    assert torch.equal(out, torch.zeros_like(out))


def test_unit_gamma_is_instance_norm():
    spade = _zero_modulation(SPADE(4, 15), gamma_bias=1.0)
    x = torch.randn(2, 4, 8, 8)
    out = spade_modulate(spade, x, torch.rand(2, 15, 8, 8))
    torch.testing.assert_close(out, nn.InstanceNorm2d(4)(x))


def test_modulation_is_local():
    """Editing the parsing inside a box leaves outputs beyond the 2-pixel receptive field unchanged."""
    spade = SPADE(4, 15).eval()
    x = torch.randn(1, 4, 16, 16)
    parsing = torch.rand(1, 15, 16, 16)
    edited = parsing.clone()
    edited[:, :, 6:9, 6:9] = torch.rand(1, 15, 3, 3)
    with torch.no_grad():
        delta = (spade(x, edited) - spade(x, parsing)).abs()
    outside = torch.ones(16, 16, dtype=torch.bool)
    outside[4:11, 4:11] = False
    assert float(delta[..., outside].max()) < 1e-6
    assert float(delta[..., ~outside].max()) > 0


def test_spade_gradient_matches_numerical():
    spade = SPADE(2, 15, hidden_channels=4).double()
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    parsing = torch.rand(1, 15, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda f, p: spade_modulate(spade, f, p), (x, parsing), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_spade_channel_contract():
    spade = SPADE(4, 15)
    with pytest.raises(ContractError):
        spade(torch.randn(1, 4, 8, 8), torch.rand(1, 17, 8, 8))
    with pytest.raises(ContractError):
        spade(torch.randn(1, 5, 8, 8), torch.rand(1, 15, 8, 8))


def test_decoder_output_shape(models):
    config, appearance, decoder = models
    _, pyramid = appearance(torch.zeros(2, 3, 32, 32))
    out = reenact_decode(decoder, pyramid, torch.rand(2, 15, 32, 32))
    assert out.shape == (2, 3, 32, 32)
    assert sum(block.use_spade for block in decoder.blocks) == config.model.spade_on_last


def test_parsing_changes_output(models):
    _, appearance, decoder = models
    decoder.eval()
    frontal = face_landmarks()
    turned = face_landmarks(pose=HeadPose(yaw=25.0))
    parsing = render_parsing_batch([frontal, turned], 32)
    with torch.no_grad():
        _, pyramid = appearance(torch.zeros(1, 3, 32, 32).expand(2, -1, -1, -1))
        out = decoder(pyramid, parsing)
    assert float((out[0] - out[1]).abs().mean()) > 0


def test_empty_parsing_stays_in_range(models):
    _, appearance, decoder = models
    with torch.no_grad():
        _, pyramid = appearance(torch.rand(1, 3, 32, 32) * 2 - 1)
        out = decoder(pyramid, torch.zeros(1, 15, 32, 32))
    assert torch.isfinite(out).all()
    assert out.abs().max() <= 1.0


def test_without_concat():
    config = desk_config(32)
    config.model.use_concat = False
    appearance = build_appearance_model(config)
    decoder = build_decoder(config, appearance)
    _, pyramid = appearance(torch.zeros(1, 3, 32, 32))
    assert decoder(pyramid, torch.zeros(1, 15, 32, 32)).shape == (1, 3, 32, 32)
    full = build_decoder(desk_config(32), appearance)
    assert count_parameters(decoder) < count_parameters(full)


def test_spade_on_one_by_one_rejected():
    with pytest.raises(ConfigError, match="1x1"):
        ReenactDecoder([8, 8, 8], 8, {2: 8, 4: 8}, 15, resolution=8, spade_on_last=3)


def test_missing_pyramid_stage_rejected():
    with pytest.raises(ConfigError):
        ReenactDecoder([8, 8, 8], 8, {2: 8}, 15, resolution=8, spade_on_last=1)


def test_smaller_than_reference_unet():
    """Conditioning through SPADE needs fewer parameters than a U-Net with a full parsing encoder."""
    config = desk_config(64)
    appearance = build_appearance_model(config)
    decoder = build_decoder(config, appearance)
    unet = build_reference_unet(config, appearance)
    _, pyramid = appearance(torch.zeros(1, 3, 64, 64))
    assert unet(pyramid, torch.zeros(1, 15, 64, 64)).shape == (1, 3, 64, 64)
    assert count_parameters(decoder) < count_parameters(unet)


LOWER_LIP = [55, 56, 57, 58, 59, 65, 66, 67]


@pytest.mark.slow
def test_trained_decoder_localizes_mouth_edits(trained_toy_run):
    """Opening the guide's mouth changes pixels around the mouth at least 3x more than elsewhere."""
    config, manifest, state, _ = trained_toy_run
    resolution = config.data.resolution
    samples = load_samples(manifest, "test", resolution)[:4]
    references = torch.stack([s.image for s in samples])
    closed = [s.landmarks for s in samples]
    opened = []
    for landmarks in closed:
        points = landmarks.points.copy()
        points[LOWER_LIP, 1] += 2.0 / resolution
        opened.append(LandmarkSet(points, landmarks.layout))

    before = reenact_faces(state, references, closed, closed, use_fusion=False)
    after = reenact_faces(state, references, closed, opened, use_fusion=False)
    change = (after - before).abs().mean(dim=1)
    for i, (a, b) in enumerate(zip(closed, opened)):
        lips = np.concatenate([a.points[48:68], b.points[48:68]]) * resolution
        x0, y0 = np.floor(lips.min(axis=0)).astype(int) - 2
        x1, y1 = np.ceil(lips.max(axis=0)).astype(int) + 3
        inside = torch.zeros(resolution, resolution, dtype=torch.bool)
        inside[max(y0, 0):y1, max(x0, 0):x1] = True
        assert change[i][inside].mean() >= 3 * change[i][~inside].mean()
