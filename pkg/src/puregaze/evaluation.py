"""Cross-domain evaluation, illumination buckets, reconstruction probes and sweeps."""
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, ProbeFailure
from .geometry import pitchyaw_angular_error
from .losses import reconstruction_loss
from .models import SAModule
from .synthdata import GazeDataset, load_dataset, to_uint8
from .training import BatchStream, TrainConfig, load_model, train


def _as_dataset(data) -> GazeDataset:
    return data if isinstance(data, GazeDataset) else load_dataset(data)


def _as_model(model):
    if isinstance(model, (str, Path)):
        bundle, config, _ = load_model(model)
        return bundle, config
    bundle, config = model
    return bundle, config


def _images(data: GazeDataset, indices, resolution: int) -> torch.Tensor:
    x = torch.from_numpy(data.images[indices]).permute(0, 3, 1, 2).float() / 255.0
    if x.shape[-1] != resolution or x.shape[-2] != resolution:
        # Declared resize rule: antialiased bilinear to the model resolution.
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", antialias=True,
                          align_corners=False)
    return x


def clamp_labels(pred: np.ndarray) -> np.ndarray:
    """Clip pitch into [-pi/2, pi/2] and wrap yaw into [-pi, pi]."""
    out = np.array(pred, dtype=np.float64)
    out[..., 0] = np.clip(out[..., 0], -np.pi / 2, np.pi / 2)
    out[..., 1] = (out[..., 1] + np.pi) % (2 * np.pi) - np.pi
    return out


@dataclass
class EvalReport:
    errors: np.ndarray  # degrees, one per sample
    predictions: np.ndarray
    labels: np.ndarray
    paths: list
    manifest: str = ""

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))

    def records(self):
        for path, err, pred, lab in zip(self.paths, self.errors, self.predictions, self.labels):
            yield {"image": path, "error_deg": float(err), "pred_pitch": float(pred[0]),
                   "pred_yaw": float(pred[1]), "pitch": float(lab[0]), "yaw": float(lab[1])}

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


def _sa_guard(module, inputs):
    raise RuntimeError("the SA-Module must not run during gaze inference")


@torch.no_grad()
def predict(bundle, data: GazeDataset, resolution: int, batch_size: int = 256) -> np.ndarray:
    bundle.eval()
    hook = bundle.sa.register_forward_pre_hook(_sa_guard)
    try:
        out = [bundle.predict(_images(data, np.arange(i, min(i + batch_size, len(data))), resolution))
               for i in range(0, len(data), batch_size)]
    finally:
        hook.remove()
    return torch.cat(out).double().numpy()


def evaluate(model, manifest, batch_size: int = 256) -> EvalReport:
    """Gaze inference (backbone + head only) and per-sample angular errors.

    ``model`` is a checkpoint path or a ``(bundle, config)`` pair.
    """
    bundle, config = _as_model(model)
    data = _as_dataset(manifest)
    pred = clamp_labels(predict(bundle, data, config.resolution, batch_size))
    errors = pitchyaw_angular_error(pred, data.labels)
    return EvalReport(errors, pred, data.labels.copy(), list(data.paths), data.manifest)


@dataclass
class BucketRow:
    bucket: int
    low: float
    high: float
    count: int
    error_a: float
    error_b: float

    @property
    def intensity(self) -> float:
        return 0.5 * (self.low + self.high)

    @property
    def improvement(self) -> float:
        return self.error_a - self.error_b

    def to_dict(self):
        return {**asdict(self), "intensity": self.intensity, "improvement": self.improvement}


@dataclass
class BucketTable:
    rows: list
    dropped: int
    total: int

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row.to_dict()) + "\n")

    def summary(self) -> str:
        lines = ["bucket  intensity  count  error_a  error_b  improvement"]
        for r in self.rows:
            lines.append(f"{r.bucket:6d}  {r.intensity:9.3f}  {r.count:5d}  {r.error_a:7.3f}  "
                         f"{r.error_b:7.3f}  {r.improvement:11.3f}")
        return "\n".join(lines)


def illumination_buckets(report_a: EvalReport, report_b: EvalReport, manifest,
                         n_buckets: int = 51, min_count: int = 7) -> BucketTable:
    """Group samples into equal-width mean-intensity buckets over [0, 1].

    Buckets with fewer than ``min_count`` images are dropped. Improvement is
    ``error_a - error_b``, so with a = baseline and b = purified model a
    positive value means the purified model is better.
    """
    data = _as_dataset(manifest)
    if report_a.paths != report_b.paths or report_a.paths != list(data.paths):
        raise DomainError("both reports must be evaluated on the given manifest")
    intensity = data.mean_intensity()
    idx = np.minimum((intensity * n_buckets).astype(np.int64), n_buckets - 1)
    rows, dropped = [], 0
    for b in np.unique(idx):
        members = idx == b
        count = int(members.sum())
        if count < min_count:
            dropped += count
            continue
        rows.append(BucketRow(int(b), b / n_buckets, (b + 1) / n_buckets, count,
                              float(report_a.errors[members].mean()), float(report_b.errors[members].mean())))
    return BucketTable(rows, dropped, len(data))


def illumination_leakage(reconstructions: np.ndarray, illumination: np.ndarray) -> float:
    """R^2 of a least-squares fit of illumination on reconstruction mean intensity."""
    illumination = np.asarray(illumination, dtype=np.float64)
    keep = np.isfinite(illumination)
    if keep.sum() < 3:
        return float("nan")
    x = reconstructions.reshape(len(reconstructions), -1).mean(axis=1)[keep].astype(np.float64)
    y = illumination[keep]
    design = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        return float("nan")
    ss_res = np.sum((y - design @ coef) ** 2)
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))


def identity_leakage(reconstructions: np.ndarray, identity: np.ndarray) -> float:
    """R^2 of predicting each reconstruction by its identity's mean reconstruction.

    This is the between-identity share of the total pixel variance: 0 when
    all identities reconstruct alike, 1 when reconstructions are fully
    determined by identity.
    """
    identity = np.asarray(identity)
    keep = identity >= 0
    if len(np.unique(identity[keep])) < 2:
        return float("nan")
    x = reconstructions[keep].reshape(int(keep.sum()), -1).astype(np.float64)
    ids = identity[keep]
    grand = x.mean(axis=0)
    ss_tot = np.sum((x - grand) ** 2)
    if ss_tot == 0:
        return 0.0
    ss_between = 0.0
    for ident in np.unique(ids):
        members = x[ids == ident]
        ss_between += len(members) * np.sum((members.mean(axis=0) - grand) ** 2)
    return float(np.clip(ss_between / ss_tot, 0.0, 1.0))


def leakage_scores(reconstructions: np.ndarray, data: GazeDataset) -> dict:
    return {"illumination": illumination_leakage(reconstructions, data.illumination),
            "identity": identity_leakage(reconstructions, data.identity)}


@torch.no_grad()
def _features(backbone, data, resolution, batch_size=128):
    backbone.eval()
    return torch.cat([backbone(_images(data, np.arange(i, min(i + batch_size, len(data))), resolution))
                      for i in range(0, len(data), batch_size)])


@torch.no_grad()
def _decode(sa, features, batch_size=128):
    sa.eval()
    return torch.cat([sa(features[i:i + batch_size]) for i in range(0, len(features), batch_size)])


def train_probe(backbone, data: GazeDataset, config: TrainConfig, steps: int, seed: int = 0,
                batch_size: int = 32):
    """Train a fresh SA-Module to reconstruct images from a frozen backbone.

    Returns ``(probe, losses)``. Raises :class:`ProbeFailure` on a non-finite loss.
    """
    features = _features(backbone, data, config.resolution)
    images = _images(data, np.arange(len(data)), config.resolution)
    torch.manual_seed(seed)
    probe = SAModule(features.shape[1], 5)
    probe.train()
    opt = torch.optim.Adam(probe.parameters(), lr=config.lr_sa, betas=(config.adam_beta1, config.adam_beta2))
    stream = BatchStream(len(data), min(batch_size, len(data)), seed)
    losses = []
    for step in range(1, steps + 1):
        idx = torch.from_numpy(stream.next())
        loss = reconstruction_loss(images[idx], probe(features[idx]))
        if not torch.isfinite(loss):
            raise ProbeFailure(f"probe reconstruction loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return probe, losses


@dataclass
class PurificationResult:
    purified: dict
    baseline_probe: dict
    purified_probe: typing.Optional[dict] = None
    probe_losses: list = field(default_factory=list)
    reconstruction_error: dict = field(default_factory=dict)
    grid: typing.Optional[Path] = None

    def to_dict(self):
        d = asdict(self)
        d["grid"] = str(self.grid) if self.grid else None
        d["probe_final_loss"] = self.probe_losses[-1] if self.probe_losses else None
        del d["probe_losses"]
        return d


def save_grid(rows, path, columns: int = 8) -> None:
    """Stack ``rows`` (each (N, 3, H, W) in [0, 1]) into one PNG, one row per entry."""
    from PIL import Image

    strips = []
    for r in rows:
        r = r[:columns].permute(0, 2, 3, 1).numpy()
        strips.append(np.concatenate(list(r), axis=1))
    Image.fromarray(to_uint8(np.concatenate(strips, axis=0))).save(path)


def visualize_purification(purified, baseline, probe_manifest, probe_steps: int, out_dir=None,
                           seed: int = 0, probe_purified: bool = False, grid_columns: int = 8,
                           fit_manifest=None):
    """Compare what the purified and the baseline features still encode.

    The purified model's own SA-Module reconstructs the probe images; a fresh
    SA-Module trained on the frozen baseline backbone does the same for the
    original features. Leakage scores summarise how much illumination and
    identity survive in each set of reconstructions. With
    ``probe_purified`` a fresh probe is also trained on the frozen purified
    backbone, which removes the adversarial history of its SA-Module from
    the comparison.

    Probes are fitted on ``fit_manifest`` when given (for instance the
    source domain, which is all the model's own SA-Module has seen) and
    scored on ``probe_manifest``; otherwise both use ``probe_manifest``.
    """
    p_bundle, p_config = _as_model(purified)
    b_bundle, b_config = _as_model(baseline)
    if p_config.resolution != b_config.resolution:
        raise DomainError("purified and baseline checkpoints use different resolutions")
    data = _as_dataset(probe_manifest)
    fit = data if fit_manifest is None else _as_dataset(fit_manifest)
    images = _images(data, np.arange(len(data)), p_config.resolution)

    own = _decode(p_bundle.sa, _features(p_bundle.backbone, data, p_config.resolution))
    probe, losses = train_probe(b_bundle.backbone, fit, b_config, probe_steps, seed)
    base = _decode(probe, _features(b_bundle.backbone, data, b_config.resolution))
    result = PurificationResult(
        purified=leakage_scores(own.numpy(), data),
        baseline_probe=leakage_scores(base.numpy(), data),
        probe_losses=losses,
        reconstruction_error={"purified": float(reconstruction_loss(images, own)),
                              "baseline_probe": float(reconstruction_loss(images, base))},
    )
    rows = [images, own, base]
    if probe_purified:
        pp, _ = train_probe(p_bundle.backbone, fit, p_config, probe_steps, seed)
        fresh = _decode(pp, _features(p_bundle.backbone, data, p_config.resolution))
        result.purified_probe = leakage_scores(fresh.numpy(), data)
        result.reconstruction_error["purified_probe"] = float(reconstruction_loss(images, fresh))
        rows.append(fresh)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.grid = out_dir / "reconstructions.png"
        save_grid(rows, result.grid, grid_columns)
        with open(out_dir / "leakage.json", "w") as fh:
            json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


SWEEP_PARAMS = ("sigma_sq", "k")


def parse_sweep_value(param: str, text):
    if param not in SWEEP_PARAMS:
        raise DomainError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if isinstance(text, str):
        text = text.strip()
        if text.lower() in ("off", "none"):
            text = None
        else:
            try:
                text = float(text)
            except ValueError:
                raise DomainError(f"cannot read sweep value {text!r} for {param}") from None
    if text is None:
        if param == "k":
            raise DomainError("k cannot be switched off; use k = 0")
        return None
    value = float(text)
    if param == "k" and not 0 <= value < 1:
        raise DomainError(f"k must lie in [0, 1), got {value}")
    if param == "sigma_sq" and not value > 0:
        raise DomainError(f"sigma_sq must be positive or 'off', got {value}")
    return value


@dataclass
class SweepRow:
    value: typing.Any
    mean_error: float
    spread: float
    seed_count: int
    errors: list
    checksums: list

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepResult:
    param: str
    rows: list

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "sweep.jsonl", "w") as fh:
            for row in self.rows:
                fh.write(json.dumps({"param": self.param, **row.to_dict()}) + "\n")
        with open(out_dir / "sweep.tsv", "w") as fh:
            fh.write("value\tmean_error\tspread\tseed_count\n")
            for row in self.rows:
                value = "off" if row.value is None else row.value
                fh.write(f"{value}\t{row.mean_error:.6f}\t{row.spread:.6f}\t{row.seed_count}\n")

    def summary(self) -> str:
        lines = [f"{self.param:>8}  mean_error  spread  seeds"]
        for r in self.rows:
            value = "off" if r.value is None else f"{r.value:g}"
            lines.append(f"{value:>8}  {r.mean_error:10.3f}  {r.spread:6.3f}  {r.seed_count:5d}")
        return "\n".join(lines)


def ablation_sweep(param: str, values, base_config: TrainConfig, source_manifest, target_manifest,
                   seeds=(0,), out_dir=None) -> SweepResult:
    """Train and cross-domain evaluate one model per (value, seed).

    ``sigma_sq = None`` ("off") trains with a uniform attention map and
    ``k = 0`` disables truncation. Each row reports the mean and population
    standard deviation of the target-domain mean error over seeds.
    """
    values = [parse_sweep_value(param, v) for v in values]
    target = _as_dataset(target_manifest)
    rows = []
    for value in values:
        errors, checksums = [], []
        for seed in seeds:
            config = base_config.replace(**{param: value, "seed": int(seed)})
            run_dir = None
            if out_dir is not None:
                tag = "off" if value is None else f"{value:g}"
                run_dir = Path(out_dir) / f"{param}={tag}" / f"seed={seed}"
            result = train(config, source_manifest, run_dir)
            errors.append(evaluate((result.bundle, config), target).mean_error)
            checksums.append(state_checksum(result.bundle.backbone))
        spread = float(np.std(errors)) if len(errors) > 1 else 0.0
        rows.append(SweepRow(value, float(np.mean(errors)), spread, len(errors), errors, checksums))
    result = SweepResult(param, rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        result.write(out_dir)
    return result
