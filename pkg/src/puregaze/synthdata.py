"""Synthetic face renders with controllable gaze-irrelevant factors.

A render is a cartoon face: background, elliptical head with an
identity-specific skin tone, hair band and mouth, and two eyes. Each eye is a
sclera disk with an iris and pupil whose centre sits at the orthographic
projection of a spherical eyeball rotated to the gaze direction, so the iris
offset is ``eye_radius * (g_x, g_y)``. Illumination multiplies the whole
image; an optional dark bar beside the head plays the part of a head rest.

Every random choice is derived from ``(seed, index)`` or from the identity
seed, so samples can be rendered in any order with identical results.
"""
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, IngestionError
from .geometry import GazeLabel, pitchyaw_to_vector

MANIFEST_NAME = "manifest.jsonl"
REQUIRED_FIELDS = ("image", "pitch", "yaw", "eye_center_left", "eye_center_right")
OPTIONAL_FIELDS = ("illumination", "identity_seed", "distractor")

SOURCE_IDENTITIES = tuple(range(1000, 1020))
TARGET_IDENTITIES = tuple(range(2000, 2010))


@dataclass(frozen=True)
class NuisanceSpec:
    illumination: tuple = (0.6, 1.0)
    identity_pool: tuple = SOURCE_IDENTITIES
    distractor: bool = False
    noise_sigma: float = 0.02

    def __post_init__(self):
        lo, hi = self.illumination
        if not 0 < lo <= hi:
            raise DomainError(f"illumination range must be positive and ordered, got {self.illumination}")
        if len(self.identity_pool) == 0:
            raise DomainError("identity_pool is empty")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class DomainSpec:
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)
    pitch_range: tuple = (-0.3, 0.3)
    yaw_range: tuple = (-0.4, 0.4)
    resolution: int = 64
    sample_count: int = 2000
    seed: int = 0

    def __post_init__(self):
        (p0, p1), (y0, y1) = self.pitch_range, self.yaw_range
        if not (-np.pi / 2 <= p0 <= p1 <= np.pi / 2 and -np.pi <= y0 <= y1 <= np.pi):
            raise DomainError("gaze ranges must be ordered and inside the valid label ranges")
        if self.resolution <= 0 or self.resolution % 32:
            raise DomainError(f"resolution {self.resolution} must be a positive multiple of 32")
        if self.sample_count < 0:
            raise DomainError("sample_count must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nuisance = d.pop("nuisance", {})
        nuisance = NuisanceSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in nuisance.items()})
        return cls(nuisance=nuisance, **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def source_domain_spec(sample_count=2000, seed=0, resolution=64) -> DomainSpec:
    """Bright, well-lit source domain of the desk-scale benchmark."""
    return DomainSpec(NuisanceSpec((0.6, 1.0), SOURCE_IDENTITIES), resolution=resolution,
                      sample_count=sample_count, seed=seed)


def target_domain_spec(sample_count=500, seed=1, resolution=64) -> DomainSpec:
    """Dark target domain with unseen identities and the same gaze range."""
    return DomainSpec(NuisanceSpec((0.15, 0.45), TARGET_IDENTITIES), resolution=resolution,
                      sample_count=sample_count, seed=seed)


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    label: GazeLabel
    eye_centers: tuple  # ((row, col) left, (row, col) right)
    nuisance_record: dict


@dataclass(frozen=True)
class Identity:
    skin: np.ndarray
    hair: np.ndarray
    background: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    face_center: tuple
    face_axes: tuple
    eye_row: float
    eye_half_gap: float
    eye_radius: float
    iris_ratio: float
    hairline: float


def make_identity(identity_seed: int) -> Identity:
    """Appearance parameters in resolution-free units (fractions of image size)."""
    rng = np.random.default_rng([7919, int(identity_seed)])
    r = rng.uniform(0.55, 0.95)
    skin = np.array([r, r * rng.uniform(0.7, 0.85), r * rng.uniform(0.55, 0.75)])
    hair = rng.uniform(0.05, 0.45) * np.array([1.0, rng.uniform(0.6, 1.0), rng.uniform(0.4, 0.9)])
    background = rng.uniform(0.2, 0.55, size=3)
    iris = rng.choice([[0.35, 0.2, 0.1], [0.2, 0.35, 0.55], [0.25, 0.4, 0.25]]) * rng.uniform(0.7, 1.1)
    lips = skin * np.array([0.9, 0.55, 0.55])
    center = (0.52 + rng.uniform(-0.02, 0.02), 0.5 + rng.uniform(-0.02, 0.02))
    axes = (rng.uniform(0.36, 0.42), rng.uniform(0.28, 0.33))
    return Identity(
        skin=skin, hair=hair, background=background, iris=np.asarray(iris), lips=lips,
        face_center=center, face_axes=axes,
        eye_row=center[0] - rng.uniform(0.06, 0.09),
        eye_half_gap=rng.uniform(0.15, 0.18),
        eye_radius=rng.uniform(0.068, 0.078),
        iris_ratio=rng.uniform(0.38, 0.45),
        hairline=center[0] - axes[0] * rng.uniform(0.55, 0.7),
    )


def _coverage(signed_distance):
    return np.clip(0.5 - signed_distance, 0.0, 1.0)


def _disk(rows, cols, center, radius):
    return _coverage(np.hypot(rows - center[0], cols - center[1]) - radius)


def _ellipse(rows, cols, center, axes):
    norm = np.hypot((rows - center[0]) / axes[0], (cols - center[1]) / axes[1])
    return _coverage((norm - 1.0) * min(axes))


def _paint(img, alpha, color):
    img += alpha[..., None] * (np.asarray(color) - img)


def iris_offset(label, eye_radius_px: float) -> np.ndarray:
    """(row, col) displacement of the iris centre for a gaze label."""
    g = pitchyaw_to_vector(label)
    return eye_radius_px * np.array([g[1], g[0]])


def render_sample(identity_seed: int, label, illumination: float = 1.0, distractor: bool = False,
                  noise_sigma: float = 0.0, resolution: int = 64, noise_seed: int = 0,
                  shift=(0.0, 0.0)) -> ImageSample:
    """Render one face. ``shift`` moves the whole head, in pixels (row, col)."""
    label = GazeLabel(*map(float, label)).validate()
    if illumination <= 0:
        raise DomainError("illumination must be positive")
    if resolution <= 0:
        raise DomainError("resolution must be positive")
    ident = make_identity(identity_seed)
    s = float(resolution)
    rows, cols = np.meshgrid(np.arange(resolution, dtype=np.float64),
                             np.arange(resolution, dtype=np.float64), indexing="ij")
    dr, dc = shift

    def px(point):
        return point[0] * s + dr, point[1] * s + dc

    img = np.broadcast_to(ident.background, (resolution, resolution, 3)).copy()
    if distractor:
        bar = ((cols >= 0.04 * s) & (cols < 0.12 * s) & (rows >= 0.25 * s)).astype(np.float64)
        _paint(img, bar, (0.12, 0.12, 0.15))

    face_c = px(ident.face_center)
    face_axes = (ident.face_axes[0] * s, ident.face_axes[1] * s)
    face = _ellipse(rows, cols, face_c, face_axes)
    _paint(img, face, ident.skin)
    hair = face * np.clip(ident.hairline * s + dr - rows + 0.5, 0.0, 1.0)
    _paint(img, hair, ident.hair)
    mouth_c = (face_c[0] + 0.22 * s, face_c[1])
    _paint(img, _ellipse(rows, cols, mouth_c, (0.025 * s, 0.09 * s)), ident.lips)

    eye_r = ident.eye_radius * s
    iris_r = ident.iris_ratio * eye_r
    offset = iris_offset(label, eye_r)
    if np.hypot(*offset) + iris_r > eye_r:
        raise DomainError(f"gaze {tuple(label)} moves the iris outside the eye")
    centers = []
    for side in (-1.0, 1.0):
        eye_c = (ident.eye_row * s + dr, (0.5 + side * ident.eye_half_gap) * s + dc)
        centers.append(eye_c)
        sclera = _disk(rows, cols, eye_c, eye_r)
        _paint(img, sclera, (0.93, 0.93, 0.9))
        iris_c = (eye_c[0] + offset[0], eye_c[1] + offset[1])
        _paint(img, sclera * _disk(rows, cols, iris_c, iris_r), ident.iris)
        _paint(img, sclera * _disk(rows, cols, iris_c, 0.45 * iris_r), (0.03, 0.03, 0.03))

    img *= illumination
    if noise_sigma > 0:
        img += noise_sigma * np.random.default_rng(noise_seed).standard_normal(img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    for r, c in centers:
        if not (0 <= r <= resolution - 1 and 0 <= c <= resolution - 1):
            raise DomainError("eye center falls outside the image; reduce shift")
    record = {"illumination": float(illumination), "identity_seed": int(identity_seed),
              "distractor": bool(distractor), "noise_sigma": float(noise_sigma),
              "shift": [float(dr), float(dc)]}
    return ImageSample(img, label, tuple(centers), record)


def sample_domain_parameters(spec: DomainSpec, index: int) -> dict:
    """Label and nuisance draw for sample ``index``; depends only on (seed, index)."""
    rng = np.random.default_rng([int(spec.seed), int(index)])
    pitch = rng.uniform(*spec.pitch_range)
    yaw = rng.uniform(*spec.yaw_range)
    identity = spec.nuisance.identity_pool[rng.integers(len(spec.nuisance.identity_pool))]
    illumination = rng.uniform(*spec.nuisance.illumination)
    shift = rng.uniform(-0.02, 0.02, size=2) * spec.resolution
    noise_seed = int(rng.integers(2 ** 31))
    return {"pitch": pitch, "yaw": yaw, "identity_seed": int(identity), "illumination": illumination,
            "shift": (float(shift[0]), float(shift[1])), "noise_seed": noise_seed}


def render_index(spec: DomainSpec, index: int) -> ImageSample:
    p = sample_domain_parameters(spec, index)
    return render_sample(p["identity_seed"], (p["pitch"], p["yaw"]), p["illumination"],
                         spec.nuisance.distractor, spec.nuisance.noise_sigma, spec.resolution,
                         p["noise_seed"], p["shift"])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_domain(spec: DomainSpec, out_dir) -> Path:
    """Render ``spec.sample_count`` images to ``out_dir/images`` and write the manifest.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    records = []
    for i in range(spec.sample_count):
        sample = render_index(spec, i)
        rel = f"images/{i:06d}.png"
        pixels = to_uint8(sample.image)
        Image.fromarray(pixels).save(out_dir / rel)
        (l_r, l_c), (r_r, r_c) = sample.eye_centers
        records.append({
            "image": rel,
            "pitch": sample.label.pitch,
            "yaw": sample.label.yaw,
            "eye_center_left": [l_r, l_c],
            "eye_center_right": [r_r, r_c],
            "illumination": sample.nuisance_record["illumination"],
            "identity_seed": sample.nuisance_record["identity_seed"],
            "distractor": sample.nuisance_record["distractor"],
            # what the illumination buckets use, from the stored 8-bit pixels
            "mean_intensity": float(pixels.mean()) / 255.0,
        })
    manifest = out_dir / MANIFEST_NAME
    write_manifest(records, manifest)
    with open(out_dir / "domain.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _validate_record(rec, lineno):
    problems = []
    if not isinstance(rec, dict):
        return [f"line {lineno}: record is not an object"]
    for name in REQUIRED_FIELDS:
        if name not in rec:
            problems.append(f"line {lineno}: missing field '{name}'")
    if problems:
        return problems
    if not isinstance(rec["image"], str) or not rec["image"]:
        problems.append(f"line {lineno}: 'image' must be a non-empty path")
    for name in ("pitch", "yaw"):
        v = rec[name]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v):
            problems.append(f"line {lineno}: '{name}' must be a finite number")
    if not problems:
        if abs(rec["pitch"]) > np.pi / 2 or abs(rec["yaw"]) > np.pi:
            problems.append(f"line {lineno}: gaze label out of range")
    for name in ("eye_center_left", "eye_center_right"):
        v = rec[name]
        if (not isinstance(v, (list, tuple)) or len(v) != 2
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            problems.append(f"line {lineno}: '{name}' must be a [row, col] pair")
    if "illumination" in rec and rec["illumination"] is not None:
        if not isinstance(rec["illumination"], (int, float)) or rec["illumination"] <= 0:
            problems.append(f"line {lineno}: 'illumination' must be a positive number")
    return problems


def read_manifest(path) -> list:
    """Parse and validate a manifest; raise :class:`IngestionError` listing every bad record."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} does not exist")
    records, problems = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            found = _validate_record(rec, lineno)
            problems.extend(found)
            if not found:
                records.append(rec)
    if problems:
        raise IngestionError(f"manifest {path} has invalid records:", problems)
    if not records:
        raise IngestionError(f"manifest {path} is empty")
    return records


@dataclass
class GazeDataset:
    """A manifest loaded into memory; images kept as uint8 (N, H, W, 3)."""

    images: np.ndarray
    labels: np.ndarray  # (N, 2) float64
    eye_centers: np.ndarray  # (N, 2, 2) float64
    illumination: np.ndarray  # (N,) float64, NaN when unknown
    identity: np.ndarray  # (N,) int64, -1 when unknown
    paths: list
    manifest: str = ""

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self):
        return self.images.shape[1]

    def mean_intensity(self) -> np.ndarray:
        return self.images.reshape(len(self), -1).mean(axis=1) / 255.0

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return GazeDataset(self.images[indices], self.labels[indices], self.eye_centers[indices],
                           self.illumination[indices], self.identity[indices],
                           [self.paths[i] for i in indices], self.manifest)


def load_dataset(manifest_path) -> GazeDataset:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    root = manifest_path.parent
    images, missing = [], []
    for i, rec in enumerate(records):
        file = root / rec["image"]
        if not file.is_file():
            missing.append(f"record {i}: image {rec['image']} not found")
            continue
        with Image.open(file) as im:
            images.append(np.asarray(im.convert("RGB")))
    if missing:
        raise IngestionError(f"manifest {manifest_path} references missing images:", missing)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise IngestionError(f"manifest {manifest_path} mixes image sizes: {sorted(shapes)}")
    h, w, _ = images[0].shape
    centers = np.array([[rec["eye_center_left"], rec["eye_center_right"]] for rec in records], dtype=np.float64)
    bad = [f"record {i}: eye center outside {h}x{w} image" for i, c in enumerate(centers)
           if np.any(c < 0) or np.any(c[:, 0] > h - 1) or np.any(c[:, 1] > w - 1)]
    if bad:
        raise IngestionError(f"manifest {manifest_path} has invalid eye centers:", bad)
    return GazeDataset(
        images=np.stack(images),
        labels=np.array([[rec["pitch"], rec["yaw"]] for rec in records], dtype=np.float64),
        eye_centers=centers,
        illumination=np.array([rec.get("illumination") if rec.get("illumination") is not None else np.nan
                               for rec in records], dtype=np.float64),
        identity=np.array([rec.get("identity_seed", -1) if rec.get("identity_seed") is not None else -1
                           for rec in records], dtype=np.int64),
        paths=[rec["image"] for rec in records],
        manifest=os.fspath(manifest_path),
    )
