"""Training workflow: joint F + D optimization, discriminator updates, fusion phase.

Batches depend only on (seed, step), so a run resumed from a checkpoint
continues exactly as the uninterrupted run would have.
"""

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from action_log import export_action_log, log_action
from appearance_model import build_appearance_model
from face_dataset_workflow import (
    build_contour_pool,
    load_samples,
    make_pair_batch,
    make_training_batch,
    read_manifest,
    select_k_shot,
)
from fusion_workflow import build_fusion_net, fuse, landmark_warp_batch
from landmark_layout import get_layout
from parsing_workflow import backend_checksum, get_shape_backend
from reenact_decoder import build_decoder
from reenact_losses import (
    REPORT_FIELDS,
    LossWeights,
    build_discriminator,
    get_id_embedder,
    get_perceptual_extractor,
    loss_app_recons,
    loss_gan,
    loss_id,
    loss_perceptual,
    loss_reconstruct,
    total_loss,
)
from reenactor_config import (
    config_from_dict,
    config_to_dict,
    echo_config,
    parsing_channels,
    stroke_sigma_for,
    validate_config,
)
from reenactor_errors import ConfigError, ContractError, DataError, NumericError
from toy_estimators import load_estimator, save_estimator, train_identity_classifier

CHECKPOINT_DIR = "checkpoints"
METRICS_FILE = "metrics.csv"
ID_CLASSIFIER_FILE = "id_classifier.pt"

# Config fields that change parameter shapes; a checkpoint only loads into a matching config
SHAPE_FIELDS = {
    "data": ("resolution", "layout"),
    "parsing": ("use_gaze",),
    "model": ("down_channels", "up_channels", "decoder_channels", "spade_on_last", "spade_hidden",
              "use_concat", "disc_scales", "disc_channels", "disc_layers", "fusion_channels"),
}


@dataclass
class TrainingState:
    config: object
    appearance: torch.nn.Module
    decoder: torch.nn.Module
    discriminator: torch.nn.Module
    fusion_net: torch.nn.Module
    opt_generator: torch.optim.Optimizer
    opt_discriminator: torch.optim.Optimizer
    opt_fusion: torch.optim.Optimizer
    step: int = 0
    extractor: object = None
    embedder: object = None
    shape_backend: object = None
    extra: dict = field(default_factory=dict)

    def generator_parameters(self):
        return list(self.appearance.parameters()) + list(self.decoder.parameters())

    def phase_for(self, step):
        return "main" if step < self.config.optim.max_steps else "fusion"


def shape_backend_for(config, module=None):
    """The frozen shape encoder named by parsing.backend"""
    parsing = config.parsing
    return get_shape_backend(parsing.backend, config.data.resolution, stroke_sigma_for(config), parsing.use_gaze,
                             get_layout(config.data.layout), module=module, model_path=parsing.external_model_path)


def build_state(config, embedder=None, extractor=None, shape_backend=None):
    """Fresh modules and optimizers, seeded by optim.seed"""
    validate_config(config)
    torch.manual_seed(config.optim.seed)
    appearance = build_appearance_model(config)
    decoder = build_decoder(config, appearance)
    discriminator = build_discriminator(config)
    fusion_net = build_fusion_net(config)

    optim = config.optim
    betas = (optim.adam_beta1, optim.adam_beta2)
    generator_params = list(appearance.parameters()) + list(decoder.parameters())
    opt_generator = torch.optim.Adam(generator_params, lr=optim.lr_generator, betas=betas)
    opt_discriminator = torch.optim.Adam(discriminator.parameters(), lr=optim.lr_discriminator, betas=betas)
    opt_fusion = torch.optim.Adam(fusion_net.parameters(), lr=optim.lr_generator, betas=betas)

    if extractor is None:
        extractor = get_perceptual_extractor(config.loss.perceptual_extractor, config.loss.plugin_seed)
    if embedder is None:
        embedder = get_id_embedder(config.loss.id_embedder, config.loss.id_embedder_path, config.loss.plugin_seed)
    if shape_backend is None:
        shape_backend = shape_backend_for(config)
    return TrainingState(config, appearance, decoder, discriminator, fusion_net,
                         opt_generator, opt_discriminator, opt_fusion, 0, extractor, embedder, shape_backend)


def _check_finite(report, step, phase):
    term = report.first_non_finite()
    if term is not None:
        diagnostics = {"step": step, "phase": phase}
        diagnostics.update({k: f"{v:.6g}" for k, v in report.as_row().items()})
        raise NumericError(term, diagnostics)


def _main_step(batch, state, weights):
    recon, pyramid = state.appearance(batch.reference)
    reenacted = state.decoder(pyramid, batch.guide_parsing)
    gan_g, gan_d = loss_gan(state.discriminator, reenacted, batch.ground_truth, batch.guide_parsing)
    parts = {
        "app_recons": loss_app_recons(recon, batch.reference),
        "reconstruct": loss_reconstruct(reenacted, batch.ground_truth),
        "perceptual": loss_perceptual(reenacted, batch.ground_truth, state.extractor,
                                      state.config.loss.perceptual_layer_weights),
        "gan_g": gan_g,
        "gan_d": gan_d,
        "id": loss_id(reenacted, batch.reference, state.embedder),
    }
    report = total_loss(parts, weights)
    _check_finite(report, state.step, "main")

    state.opt_generator.zero_grad()
    report.total.backward()
    state.opt_generator.step()

    # no adversarial term, nothing for the discriminator to learn
    if weights.alpha_g > 0:
        state.opt_discriminator.zero_grad()
        gan_d.backward()
        state.opt_discriminator.step()
    return report


def _fusion_step(batch, state, weights):
    with torch.no_grad():
        _, pyramid = state.appearance(batch.reference)
        synthesized = state.decoder(pyramid, batch.guide_parsing)
    warped = landmark_warp_batch(batch.reference, batch.reference_landmarks, batch.guide_landmarks,
                                 state.config.fusion.warp_mode)
    fused, _ = fuse(synthesized, warped, batch.guide_parsing, state.fusion_net)
    parts = {
        "reconstruct": loss_reconstruct(fused, batch.ground_truth),
        "perceptual": loss_perceptual(fused, batch.ground_truth, state.extractor,
                                      state.config.loss.perceptual_layer_weights),
        "id": loss_id(fused, batch.reference, state.embedder),
    }
    report = total_loss(parts, weights)
    _check_finite(report, state.step, "fusion")
    state.opt_fusion.zero_grad()
    report.total.backward()
    state.opt_fusion.step()
    return report


def train_step(batch, state, phase="main"):
    """One generator + discriminator update (main) or one FusionNet update (fusion)"""
    weights = LossWeights.from_config(state.config)
    for module in (state.appearance, state.decoder, state.discriminator, state.fusion_net):
        module.train()
    if phase == "main":
        report = _main_step(batch, state, weights)
    elif phase == "fusion":
        report = _fusion_step(batch, state, weights)
    else:
        raise ConfigError(f"Unknown training phase '{phase}'")
    state.step += 1
    return state, report


def batch_for_step(samples, contour_pool, config, step, phase="main", backend=None):
    """The batch of a given step; a pure function of (seed, step)"""
    rng = np.random.default_rng([config.optim.seed, step])
    n = config.optim.batch_size
    chosen = rng.choice(len(samples), size=n, replace=len(samples) < n)
    resolution = config.data.resolution
    sigma = stroke_sigma_for(config)
    use_gaze = config.parsing.use_gaze
    if phase == "main":
        return make_training_batch([samples[i] for i in chosen], contour_pool, config.data.p_swap,
                                   int(rng.integers(2 ** 31)), resolution, sigma, use_gaze, backend)

    references, targets = [], []
    for i in chosen:
        reference = samples[i]
        if config.fusion.same_identity_pairs:
            others = [j for j, s in enumerate(samples) if s.identity_id == reference.identity_id and j != i]
        else:
            others = []
        target = samples[others[rng.integers(len(others))]] if others else reference
        references.append(reference)
        targets.append(target)
    return make_pair_batch(references, targets, resolution, sigma, use_gaze, backend)


# Checkpoints


def save_checkpoint(state, path):
    """Atomic write: temp file then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "step": state.step,
        "config": config_to_dict(state.config),
        "modules": {
            "appearance": state.appearance.state_dict(),
            "decoder": state.decoder.state_dict(),
            "discriminator": state.discriminator.state_dict(),
            "fusion_net": state.fusion_net.state_dict(),
        },
        "optimizers": {
            "generator": state.opt_generator.state_dict(),
            "discriminator": state.opt_discriminator.state_dict(),
            "fusion": state.opt_fusion.state_dict(),
        },
        "extra": state.extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def _check_shape_fields(saved, config):
    current = config_to_dict(config)
    for section, names in SHAPE_FIELDS.items():
        for name in names:
            if saved[section][name] != current[section][name]:
                raise ConfigError(
                    f"Checkpoint was trained with {section}.{name}={saved[section][name]!r}, "
                    f"config has {current[section][name]!r}"
                )


def checkpoint_config(path):
    """The resolved config a checkpoint was trained with"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return validate_config(config_from_dict(payload["config"]))


def load_checkpoint(path, config=None, embedder=None, extractor=None, shape_backend=None):
    """Rebuild a TrainingState; the config echo is validated against `config`"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    saved = payload["config"]
    if config is None:
        config = validate_config(config_from_dict(saved))
    else:
        _check_shape_fields(saved, config)
    extra = payload.get("extra", {})
    if embedder is None and config.loss.id_embedder == "toy_classifier" and not config.loss.id_embedder_path:
        classifier_path = extra.get("id_classifier_path")
        if classifier_path:
            embedder = get_id_embedder("toy_classifier", classifier=load_estimator(classifier_path))
    state = build_state(config, embedder, extractor, shape_backend)
    modules = payload["modules"]
    state.appearance.load_state_dict(modules["appearance"])
    state.decoder.load_state_dict(modules["decoder"])
    state.discriminator.load_state_dict(modules["discriminator"])
    state.fusion_net.load_state_dict(modules["fusion_net"])
    optimizers = payload["optimizers"]
    state.opt_generator.load_state_dict(optimizers["generator"])
    state.opt_discriminator.load_state_dict(optimizers["discriminator"])
    state.opt_fusion.load_state_dict(optimizers["fusion"])
    state.step = int(payload["step"])
    state.extra = dict(extra)
    return state


def checkpoint_path(run_dir, step):
    return Path(run_dir) / CHECKPOINT_DIR / f"step_{step:07d}.pt"


def latest_checkpoint(run_dir):
    paths = sorted((Path(run_dir) / CHECKPOINT_DIR).glob("step_*.pt"))
    return paths[-1] if paths else None


# Metrics


def _append_metrics(rows, run_dir):
    if not rows:
        return
    path = Path(run_dir) / METRICS_FILE
    frame = pd.DataFrame(rows, columns=["step", "phase", *REPORT_FIELDS])
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    rows.clear()


def _truncate_metrics(run_dir, step):
    """Drop rows beyond a resume point"""
    path = Path(run_dir) / METRICS_FILE
    if path.exists():
        frame = pd.read_csv(path)
        frame[frame["step"] <= step].to_csv(path, index=False)


def read_metrics(run_dir):
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise DataError(f"No metrics file at {path}")
    return pd.read_csv(path)


# Runs


def check_manifest_config(manifest, config):
    """Manifest and config must agree on layout, resolution and channel count"""
    if manifest.layout_name != config.data.layout:
        raise ConfigError(f"Manifest layout '{manifest.layout_name}' differs from data.layout '{config.data.layout}'")
    if manifest.resolution is not None and manifest.resolution != config.data.resolution:
        raise ConfigError(f"Manifest images are {manifest.resolution}px, config expects {config.data.resolution}px")
    if config.parsing.use_gaze and not manifest.layout.has_gaze:
        raise ConfigError(f"{parsing_channels(config)} parsing channels need gaze landmarks the manifest lacks")


def _prepare_embedder(config, samples, run_dir):
    """Train the toy identity classifier when the config asks for one without a path"""
    loss = config.loss
    if loss.id_embedder != "toy_classifier":
        return get_id_embedder(loss.id_embedder, loss.id_embedder_path, loss.plugin_seed), None
    if loss.id_embedder_path:
        return get_id_embedder("toy_classifier", loss.id_embedder_path), loss.id_embedder_path
    path = Path(run_dir) / ID_CLASSIFIER_FILE
    if path.exists():
        classifier = load_estimator(path)
    else:
        images = torch.stack([s.image for s in samples])
        ids = torch.tensor([s.identity_id for s in samples])
        classifier = train_identity_classifier(images, ids, seed=config.optim.seed)
        save_estimator(classifier, path)
    return get_id_embedder("toy_classifier", classifier=classifier), str(path)


def _check_backend_frozen(state, checksum):
    if backend_checksum(state.shape_backend) != checksum:
        raise ContractError(f"Shape backend '{state.shape_backend.name}' changed during training at step {state.step}")


def _run_loop(state, samples, contour_pool, run_dir, total_steps, progress=True):
    config = state.config
    checksum = backend_checksum(state.shape_backend)
    rows = []
    bar = tqdm(range(state.step, total_steps), desc="train", disable=not progress, leave=False)
    for step in bar:
        phase = state.phase_for(step)
        batch = batch_for_step(samples, contour_pool, config, step, phase, state.shape_backend)
        state, report = train_step(batch, state, phase)
        rows.append({"step": state.step, "phase": phase, **report.as_row()})
        if state.step % config.optim.log_every == 0:
            bar.set_postfix(total=f"{report.as_row()['total']:.4f}", phase=phase)
            _append_metrics(rows, run_dir)
        if state.step % config.optim.checkpoint_every == 0:
            _append_metrics(rows, run_dir)
            _check_backend_frozen(state, checksum)
            save_checkpoint(state, checkpoint_path(run_dir, state.step))
    _append_metrics(rows, run_dir)
    _check_backend_frozen(state, checksum)
    return state


def train(config, manifest, run_dir, resume=True, progress=True, shape_backend=None):
    """Run the main phase to max_steps, then the fusion phase; returns the final state"""
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    validate_config(config)
    check_manifest_config(manifest, config)
    run_dir = Path(run_dir)
    echo_config(config, run_dir)

    samples = load_samples(manifest, "train", config.data.resolution)
    if not samples:
        raise DataError("The manifest has no training samples")
    contour_pool = build_contour_pool(samples)
    embedder, classifier_path = _prepare_embedder(config, samples, run_dir)

    latest = latest_checkpoint(run_dir) if resume else None
    if latest is not None:
        state = load_checkpoint(latest, config, embedder=embedder, shape_backend=shape_backend)
        _truncate_metrics(run_dir, state.step)
        log_action(f"Resumed from {latest} at step {state.step}")
    else:
        state = build_state(config, embedder=embedder, shape_backend=shape_backend)
        (run_dir / METRICS_FILE).unlink(missing_ok=True)
    if classifier_path:
        state.extra["id_classifier_path"] = classifier_path

    optim = config.optim
    total_steps = 0
    if optim.max_steps > 0:
        total_steps = optim.max_steps + (optim.fusion_steps if config.fusion.enabled else 0)
    log_action(f"Training {len(samples)} samples, {manifest.split('train')['identity'].nunique()} identities, "
               f"steps {state.step} -> {total_steps}")
    state = _run_loop(state, samples, contour_pool, run_dir, total_steps, progress)
    save_checkpoint(state, checkpoint_path(run_dir, state.step))
    export_action_log(run_dir / "action_log.csv")
    log_action(f"Training finished at step {state.step}; checkpoint in {run_dir / CHECKPOINT_DIR}")
    return state


def fine_tune_k_shot(checkpoint, manifest, k, steps, run_dir, config=None, progress=True):
    """Continue main-phase training on k reference images per test identity.

    `config` may differ from the checkpoint's in any field that leaves parameter shapes alone.
    """
    if config is not None:
        config = copy.deepcopy(validate_config(config))
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    state = load_checkpoint(checkpoint, config)
    config = state.config
    check_manifest_config(manifest, config)
    run_dir = Path(run_dir)
    echo_config(config, run_dir, name=f"resolved_config_k{k}.json")

    references = select_k_shot(load_samples(manifest, "test", config.data.resolution), k, config.optim.seed)
    if not references:
        raise DataError("No test identities to fine-tune on")
    train_samples = load_samples(manifest, "train", config.data.resolution)
    contour_pool = build_contour_pool(train_samples + references)

    # main phase only, continuing the step counter
    start = state.step
    config.optim.max_steps = start + steps
    (run_dir / METRICS_FILE).unlink(missing_ok=True)
    state = _run_loop(state, references, contour_pool, run_dir, start + steps, progress)
    state.extra["k_shot"] = k
    path = save_checkpoint(state, checkpoint_path(run_dir, state.step))
    log_action(f"{k}-shot fine-tune: {steps} steps on {len(references)} references; saved {path}")
    return state
