"""Training loop with per-network optimizers and routed gradients.

One forward pass per batch produces features, gaze predictions and
reconstructions. Each of the three losses is then differentiated only with
respect to the parameter group that owns it (see
:func:`puregaze.models.stop_gradient_boundaries`), all gradients are taken
at the pre-step parameters, and the three Adam optimizers step in the order
SA-Module, head, backbone.
"""
import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import DEFAULT_SIGMA_SQ, REFERENCE_RESOLUTION, batch_attention_maps, scaled_sigma_sq
from .checkpoint import load_states, read_checkpoint, save_checkpoint
from .errors import ConfigurationError, DomainError
from .losses import LossReport, LossWeights, adversarial_term, gaze_loss, reconstruction_loss
from .models import PARAMETER_GROUPS, build_puregaze, stop_gradient_boundaries
from .synthdata import GazeDataset, load_dataset

log = logging.getLogger(__name__)

LOSS_ORDER = ("sa", "mlp", "backbone")
OPTIMIZER_GROUP = {"sa": "sa", "mlp": "head", "backbone": "backbone"}


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    k: float = 0.75
    # None switches the attention weighting off (M = 1).
    sigma_sq: typing.Optional[float] = DEFAULT_SIGMA_SQ
    sigma_sq_reference_resolution: int = REFERENCE_RESOLUTION
    lr_backbone: float = 1e-4
    lr_head: float = 1e-4
    lr_sa: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    steps: int = 3000
    seed: int = 0
    resolution: int = 64
    baseline: bool = False
    backbone_width: int = 64
    head_hidden: int = 1000
    # "random", or a path to a torchvision resnet18 state dict.
    init: str = "random"
    log_every: int = 10
    checkpoint_every: int = 0
    deterministic: bool = True
    threads: int = 0

    def __post_init__(self):
        self.loss_weights()
        if self.sigma_sq is not None and not self.sigma_sq > 0:
            raise ConfigurationError(f"sigma_sq must be positive or None, got {self.sigma_sq}")
        if self.batch_size <= 0 or self.steps < 0:
            raise ConfigurationError("batch_size must be positive and steps non-negative")
        if self.resolution <= 0 or self.resolution % 32:
            raise ConfigurationError(f"resolution {self.resolution} is not divisible by 32")

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self.alpha, self.beta, self.k)
        except DomainError as exc:
            raise ConfigurationError(str(exc)) from exc

    def effective_sigma_sq(self):
        """sigma^2 in squared pixels at the training resolution."""
        if self.sigma_sq is None:
            return None
        return scaled_sigma_sq(self.sigma_sq, self.resolution, self.sigma_sq_reference_resolution)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _field_types():
    return typing.get_type_hints(TrainConfig)


def parse_config_value(name: str, text: str):
    """Coerce ``text`` to the type of TrainConfig field ``name``."""
    types = _field_types()
    if name not in types:
        raise ConfigurationError(f"unknown config key {name!r}")
    tp = types[name]
    text = text.strip()
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        if text.lower() in ("none", "off", ""):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return tp(text)
    except ValueError:
        raise ConfigurationError(f"cannot parse {name} = {text!r} as {tp.__name__}") from None


def read_config_file(path) -> dict:
    """Read ``key = value`` lines (``#`` starts a comment) into a dict of typed values."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = parse_config_value(key, value)
    return values


def load_config(path, **overrides) -> TrainConfig:
    values = read_config_file(path)
    values.update(overrides)
    return TrainConfig.from_dict(values)


def write_config_file(config: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        for key, value in config.to_dict().items():
            fh.write(f"{key} = {'none' if value is None else value}\n")


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W) in [0, 1]
    labels: torch.Tensor  # (B, 2)
    eye_centers: torch.Tensor  # (B, 2, 2)

    @classmethod
    def from_dataset(cls, data: GazeDataset, indices=None, dtype=torch.float32):
        if indices is None:
            indices = np.arange(len(data))
        images = torch.from_numpy(data.images[indices]).permute(0, 3, 1, 2).to(dtype) / 255.0
        return cls(images, torch.from_numpy(data.labels[indices]).to(dtype),
                   torch.from_numpy(data.eye_centers[indices]).to(dtype))

    def __len__(self):
        return len(self.labels)

    def take(self, index):
        return Batch(self.images[index], self.labels[index], self.eye_centers[index])


def build_model(config: TrainConfig):
    torch.manual_seed(config.seed)
    bundle = build_puregaze(config.resolution, config.backbone_width, config.head_hidden)
    if config.init != "random":
        state = torch.load(config.init, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        try:
            bundle.backbone.load_state_dict(state)
        except RuntimeError as exc:
            raise ConfigurationError(f"cannot initialize backbone from {config.init}: {exc}") from exc
    return bundle


def make_optimizers(bundle, config: TrainConfig) -> dict:
    lrs = {"backbone": config.lr_backbone, "head": config.lr_head, "sa": config.lr_sa}
    betas = (config.adam_beta1, config.adam_beta2)
    return {g: torch.optim.Adam(getattr(bundle, g).parameters(), lr=lrs[g], betas=betas)
            for g in PARAMETER_GROUPS}


def train_step(bundle, optimizers: dict, batch: Batch, config: TrainConfig,
               active=LOSS_ORDER) -> LossReport:
    """One routed update; ``active`` restricts which of sa/mlp/backbone are applied."""
    unknown = set(active) - set(LOSS_ORDER)
    if unknown:
        raise ConfigurationError(f"unknown losses {sorted(unknown)}")
    weights = config.loss_weights()
    routes = stop_gradient_boundaries(bundle)
    groups = bundle.parameter_groups()
    bundle.train()

    features = bundle.backbone(batch.images)
    pred = bundle.head(features)
    l_gaze = gaze_loss(pred, batch.labels)
    report = LossReport(gaze_loss=l_gaze.item(), mlp_loss=l_gaze.item())
    losses = {"mlp": l_gaze}
    if config.baseline:
        losses["backbone"] = weights.beta * l_gaze
    else:
        sigma_sq = config.effective_sigma_sq()
        if sigma_sq is not None and batch.eye_centers is None:
            raise ConfigurationError("eye centers are required when the attention map is enabled")
        recon = bundle.sa(features)
        l_rec = reconstruction_loss(batch.images, recon)
        h, w = batch.images.shape[-2:]
        attention = batch_attention_maps(batch.eye_centers, h, w, sigma_sq)
        term, active_fraction = adversarial_term(batch.images, recon, attention, weights.k)
        losses["sa"] = l_rec
        losses["backbone"] = weights.alpha * term + weights.beta * l_gaze
        report.rec_loss = report.sa_loss = l_rec.item()
        report.adv_loss = 1.0 - l_rec.item()
        report.adv_term = term.item()
        report.gated_fraction = active_fraction.item()
    report.backbone_loss = losses["backbone"].item()

    grads = {}
    for name in LOSS_ORDER:
        if name not in active or name not in losses:
            continue
        params = [p for g in routes[name].updates for p in groups[g]]
        grads[name] = (params, torch.autograd.grad(losses[name], params, retain_graph=True, allow_unused=True))
    for name in LOSS_ORDER:
        if name not in grads:
            continue
        params, gs = grads[name]
        for p, g in zip(params, gs):
            p.grad = g
        optimizers[OPTIMIZER_GROUP[name]].step()
        for p in params:
            p.grad = None
    return report


class BatchStream:
    """Endless seeded stream of index batches drawn epoch by epoch without replacement."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n == 0:
            raise DomainError("cannot draw batches from an empty dataset")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng([int(seed), 104729])
        self.queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self.queue) < self.batch_size:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        out, self.queue = self.queue[:self.batch_size], self.queue[self.batch_size:]
        return out


@dataclass
class TrainResult:
    bundle: typing.Any
    config: TrainConfig
    reports: list = field(default_factory=list)
    checkpoint: typing.Optional[Path] = None


def _setup_torch(config: TrainConfig):
    if config.threads:
        torch.set_num_threads(config.threads)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)


def run_steps(bundle, data: GazeDataset, config: TrainConfig, steps: int, log_path=None,
              checkpoint_cb=None, step_offset: int = 0):
    """Train ``bundle`` in place for ``steps`` steps and return the loss reports."""
    _setup_torch(config)
    optimizers = make_optimizers(bundle, config)
    full = Batch.from_dataset(data)
    stream = BatchStream(len(data), min(config.batch_size, len(data)), config.seed)
    reports = []
    log_fh = open(log_path, "w", buffering=1) if log_path else None
    try:
        for step in range(1, steps + 1):
            report = train_step(bundle, optimizers, full.take(torch.from_numpy(stream.next())), config)
            reports.append(report)
            if not np.isfinite(report.backbone_loss):
                raise ConfigurationError(f"training diverged at step {step + step_offset}")
            if log_fh and (step % max(config.log_every, 1) == 0 or step == steps):
                log_fh.write(json.dumps({"step": step + step_offset, **report.to_dict()}) + "\n")
            if step % max(config.log_every, 1) == 0:
                log.info("step %d gaze %.4f rec %.4f", step + step_offset, report.gaze_loss, report.rec_loss)
            if checkpoint_cb and config.checkpoint_every and step % config.checkpoint_every == 0 and step < steps:
                checkpoint_cb(step + step_offset)
    finally:
        if log_fh:
            log_fh.close()
    return reports


def _metadata(config: TrainConfig, step: int, **extra):
    return {"config": config.to_dict(), "seed": config.seed, "step": step,
            "architecture": {"backbone": "resnet18", "width": config.backbone_width,
                             "head_hidden": config.head_hidden, "resolution": config.resolution},
            **extra}


def train(config: TrainConfig, manifest, out_dir=None) -> TrainResult:
    """Train from scratch on ``manifest``; writes ``checkpoint.npz`` and ``train_log.jsonl`` into ``out_dir``."""
    data = load_dataset(manifest)
    if data.resolution != config.resolution:
        raise ConfigurationError(
            f"manifest images are {data.resolution}px but config.resolution is {config.resolution}")
    bundle = build_model(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def save(step, name=None):
        path = out_dir / (name or f"checkpoint_{step:06d}.npz")
        save_checkpoint(path, bundle, _metadata(config, step, manifest=str(manifest)))
        return path

    reports = run_steps(bundle, data, config, config.steps,
                        log_path=out_dir / "train_log.jsonl" if out_dir else None,
                        checkpoint_cb=save if out_dir else None)
    ckpt = save(config.steps, "checkpoint.npz") if out_dir else None
    return TrainResult(bundle, config, reports, ckpt)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(bundle, config, metadata)``."""
    states, meta = read_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    bundle = build_puregaze(config.resolution, config.backbone_width, config.head_hidden)
    load_states(bundle, states)
    bundle.eval()
    return bundle, config, meta


def select_per_identity(data: GazeDataset, per_identity: int, seed: int) -> np.ndarray:
    """Indices of at most ``per_identity`` samples for every identity, drawn with ``seed``."""
    rng = np.random.default_rng([int(seed), 15485863])
    chosen = []
    for ident in np.unique(data.identity):
        idx = np.flatnonzero(data.identity == ident)
        chosen.extend(rng.permutation(idx)[:per_identity].tolist())
    return np.sort(np.asarray(chosen, dtype=np.int64))


def finetune(checkpoint, manifest, steps: int, out_path=None, per_identity: int = 5,
             seed: int = 0, batch_size=None):
    """Continue training a checkpoint on a few target samples per identity.

    Samples without an identity field count as one identity. Returns
    ``(bundle, config, reports)``.
    """
    if per_identity <= 0:
        raise DomainError("per_identity must be positive")
    states, meta = read_checkpoint(checkpoint)
    config = TrainConfig.from_dict(meta["config"])
    data = load_dataset(manifest)
    subset = data.subset(select_per_identity(data, per_identity, seed))
    if len(subset) == 0:
        raise DomainError("the fine-tuning set is empty")
    if steps == 0:
        bundle, _, _ = load_model(checkpoint)
        if out_path is not None:
            Path(out_path).write_bytes(Path(checkpoint).read_bytes())
        return bundle, config, []
    if subset.resolution != config.resolution:
        raise ConfigurationError("target images do not match the checkpoint resolution")
    ft_config = config.replace(seed=seed, batch_size=batch_size or min(config.batch_size, len(subset)))
    bundle = build_puregaze(config.resolution, config.backbone_width, config.head_hidden)
    load_states(bundle, states)
    reports = run_steps(bundle, subset, ft_config, steps, step_offset=meta.get("step", 0))
    if out_path is not None:
        history = list(meta.get("finetune", [])) + [
            {"manifest": str(manifest), "steps": steps, "per_identity": per_identity,
             "samples": len(subset), "seed": seed}]
        save_checkpoint(out_path, bundle,
                        _metadata(config, meta.get("step", 0) + steps, manifest=meta.get("manifest"),
                                  finetune=history))
    return bundle, config, reports
