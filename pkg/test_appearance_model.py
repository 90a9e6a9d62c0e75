import pytest
import torch

from appearance_model import AppearanceAutoEncoder, appearance_decode, appearance_encode, build_appearance_model
from reenact_losses import loss_app_recons
from reenactor_config import desk_config, full_config
from reenactor_errors import ConfigError, ContractError


def test_full_scale_bottleneck():
    """256x256 with the full-scale schedule encodes to a 1x1 code with 1024 channels."""
    model = build_appearance_model(full_config())
    code = appearance_encode(model, torch.zeros(1, 3, 256, 256))
    assert code.shape == (1, 1024, 1, 1)


def test_desk_bottleneck():
    model = build_appearance_model(desk_config(64))
    assert len(model.encoder) == 6
    code = appearance_encode(model, torch.rand(2, 3, 64, 64) * 2 - 1)
    assert code.shape == (2, 128, 1, 1)


def test_pyramid_ladder():
    """Stages are 2, 4, ... resolution / 2 and the reconstruction is full size."""
    model = build_appearance_model(desk_config(64))
    recon, pyramid = model(torch.zeros(1, 3, 64, 64))
    assert pyramid.sizes == [2, 4, 8, 16, 32]
    assert recon.shape == (1, 3, 64, 64)
    assert set(model.pyramid_channels()) == {2, 4, 8, 16, 32}
    for feature in pyramid.features:
        assert feature.shape[1] == model.pyramid_channels()[feature.shape[-1]]


def test_reconstruction_bounded():
    model = build_appearance_model(desk_config(32))
    recon, _ = model(torch.randn(2, 3, 32, 32) * 5)
    assert recon.abs().max() <= 1.0


def test_codes_differ():
    model = build_appearance_model(desk_config(32)).eval()
    a = appearance_encode(model, torch.rand(1, 3, 32, 32) * 2 - 1)
    b = appearance_encode(model, torch.rand(1, 3, 32, 32) * 2 - 1)
    assert not torch.equal(a, b)


def test_projection_of_finest_stage_is_reconstruction():
    model = build_appearance_model(desk_config(32)).eval()
    with torch.no_grad():
        recon, pyramid = appearance_decode(model, appearance_encode(model, torch.zeros(1, 3, 32, 32)))
        assert torch.equal(model.project(pyramid.features[-1]), recon)


def test_inference_is_deterministic():
    model = build_appearance_model(desk_config(32)).eval()
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.equal(model(x)[0], model(x)[0])


def test_every_parameter_gets_gradient():
    """The reconstruction loss alone reaches every parameter of the auto-encoder."""
    model = build_appearance_model(desk_config(32))
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    recon, _ = model(x)
    loss_app_recons(recon, x).backward()
    for name, param in model.named_parameters():
        assert param.grad is not None and param.grad.norm() > 0, name


def test_wrong_input_size():
    model = build_appearance_model(desk_config(32))
    with pytest.raises(ContractError):
        appearance_encode(model, torch.zeros(1, 3, 64, 64))
    with pytest.raises(ContractError):
        appearance_decode(model, torch.zeros(1, 7, 1, 1))


def test_indivisible_resolution():
    with pytest.raises(ConfigError):
        AppearanceAutoEncoder([8, 16, 32], [16, 8], resolution=36)
