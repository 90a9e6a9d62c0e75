import numpy as np
import pytest
import torch

from fusion_workflow import FusionNet, fit_tps, fuse, landmark_warp, landmark_warp_batch
from landmark_layout import LandmarkSet
from reenactor_errors import ConfigError, DataError, WarpError
from synthetic_faces import face_landmarks

RES = 32


@pytest.fixture
def face():
    return face_landmarks()


def _image():
    return torch.rand(3, RES, RES) * 2 - 1


def test_identity_warp_is_exact(face):
    """dst == src leaves the reference untouched under nearest sampling."""
    reference = _image()
    warped, field = landmark_warp(reference, face, face, mode="nearest")
    assert torch.equal(warped, reference)
    assert float(field.abs().max()) == 0.0


def test_translation_warp(face):
    """Moving every landmark 5 px right moves the image 5 px right."""
    reference = _image()
    shift = 5
    warped, field = landmark_warp(reference, face, face.translated(shift / RES), mode="bilinear")
    torch.testing.assert_close(warped[:, :, shift:], reference[:, :, :-shift], atol=1e-4, rtol=0)
    torch.testing.assert_close(field[0], torch.full((RES, RES), -float(shift)), atol=1e-4, rtol=0)


def test_constant_image_stays_constant(face):
    reference = torch.full((3, RES, RES), 0.25)
    turned = LandmarkSet(face.points * 0.9 + 0.05, face.layout)
    warped, _ = landmark_warp(reference, face, turned)
    torch.testing.assert_close(warped, reference)


def test_tps_interpolates_landmarks(face):
    """The fitted spline carries every destination landmark to its source within 0.5 px."""
    src = face.to_pixels(RES)
    dst = LandmarkSet(face.points + np.random.default_rng(0).normal(0, 0.01, face.points.shape), face.layout).to_pixels(RES)
    tps = fit_tps(dst, src)
    assert np.abs(tps(dst) - src).max() < 0.5


def test_collinear_destination(face):
    points = np.full_like(face.points, np.nan)
    points[:4] = [(0.1, 0.5), (0.3, 0.5), (0.5, 0.5), (0.7, 0.5)]
    collapsed = LandmarkSet(points, face.layout)
    with pytest.raises(WarpError):
        landmark_warp(_image(), face, collapsed)


def test_layout_mismatch(face):
    other = face_landmarks(layout_name="ibug68")
    with pytest.raises(DataError):
        landmark_warp(_image(), face, other)
    with pytest.raises(ConfigError):
        landmark_warp(_image(), face, face, mode="cubic")


def test_batch_warp(face):
    refs = torch.stack([_image(), _image()])
    out = landmark_warp_batch(refs, [face, face], [face, face], mode="nearest")
    assert torch.equal(out, refs)


@pytest.mark.parametrize("value", [1, 0])
def test_constant_mask_selects_branch(value):
    synthesized, warped = _image().unsqueeze(0), _image().unsqueeze(0)
    net = FusionNet(8).set_constant_mask(value)
    out, mask = fuse(synthesized, warped, torch.rand(1, 15, RES, RES), net)
    assert torch.equal(mask, torch.full_like(mask, float(value)))
    assert torch.equal(out, synthesized if value else warped)


def test_equal_inputs_are_a_fixed_point():
    image = _image().unsqueeze(0)
    out, _ = fuse(image, image.clone(), torch.rand(1, 15, RES, RES), FusionNet(8))
    assert torch.equal(out, image)


def test_blend_is_convex():
    synthesized, warped = _image().unsqueeze(0), _image().unsqueeze(0)
    out, mask = fuse(synthesized, warped, torch.rand(1, 15, RES, RES), FusionNet(8))
    low, high = torch.minimum(synthesized, warped), torch.maximum(synthesized, warped)
    eps = 1e-6
    assert bool((out >= low - eps).all() and (out <= high + eps).all())
    assert mask.shape == (1, 1, RES, RES)
    assert bool((mask >= 0).all() and (mask <= 1).all())


def test_gaze_points_are_optional():
    """Missing gaze points are left out of the spline fit."""
    face = face_landmarks().without_group("gaze")
    warped, _ = landmark_warp(_image(), face, face.translated(2 / RES))
    assert warped.shape == (3, RES, RES)


def _lower_face_mask(samples, resolution):
    """Box from the nose tip down to the chin, between the jaw points 4 and 12"""
    masks = np.zeros((len(samples), 1, resolution, resolution), dtype=np.float32)
    for mask, sample in zip(masks, samples):
        points = sample.landmarks.points * resolution
        top, bottom = max(int(points[30, 1]), 0), int(np.ceil(points[8, 1])) + 1
        left, right = max(int(points[4, 0]), 0), int(np.ceil(points[12, 0])) + 1
        mask[:, top:bottom, left:right] = 1.0
    return torch.from_numpy(masks)


@pytest.mark.slow
def test_fusion_does_not_worsen_the_lower_face(trained_toy_run):
    """On held-out same-identity pairs the fused lower face is at least as close to the target."""
    from eval_workflow import reenact_faces
    from face_dataset_workflow import load_samples

    config, manifest, state, _ = trained_toy_run
    test = load_samples(manifest, "test", config.data.resolution)
    references, targets = [], []
    for identity in sorted({s.identity_id for s in test}):
        own = [s for s in test if s.identity_id == identity]
        references += [own[0]] * (len(own) - 1)
        targets += own[1:]
    args = (state, torch.stack([r.image for r in references]), [r.landmarks for r in references],
            [t.landmarks for t in targets])
    truth = torch.stack([t.image for t in targets])
    mask = _lower_face_mask(targets, config.data.resolution)

    def masked_l1(output):
        return float(((output - truth).abs() * mask).sum() / (3 * mask.sum()))

    assert masked_l1(reenact_faces(*args, use_fusion=True)) <= masked_l1(reenact_faces(*args, use_fusion=False))
