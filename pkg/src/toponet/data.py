"""Landmark samples: synthetic generation, normalization, patches, IO, splits."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, ParseError, ValidationError


@dataclass(frozen=True)
class LandmarkSample:
    coords: np.ndarray  # (2, n)
    label: int
    id: str
    patches: np.ndarray | None = None  # (n, a, a), values in [0, 1]
    embeddings: np.ndarray | None = None  # (n, d) precomputed texture vectors

    @property
    def n(self):
        return self.coords.shape[1]


@dataclass
class Dataset:
    samples: list
    num_classes: int
    mirror_map: np.ndarray | None = None
    root: int = 0

    def __len__(self):
        return len(self.samples)

    @property
    def n(self):
        return self.samples[0].n

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], self.num_classes, self.mirror_map, self.root)

    def arrays(self):
        """Stacked (coords (N, 2, n), texture or None, labels)."""
        coords = np.stack([s.coords for s in self.samples])
        if all(s.patches is not None for s in self.samples):
            tex = np.stack([s.patches for s in self.samples])
        elif all(s.embeddings is not None for s in self.samples):
            tex = np.stack([s.embeddings for s in self.samples])
        else:
            tex = None
        return coords, tex, self.labels


# ---------------------------------------------------------------------------
# normalization and patches


def normalize_landmarks(coords):
    """Centroid to the origin, RMS distance from the centroid scaled to 1."""
    coords = np.asarray(coords, dtype=np.float64)
    centered = coords - coords.mean(axis=-1, keepdims=True)
    rms = np.sqrt((centered**2).sum(axis=-2).mean(axis=-1))
    rms = np.where(rms > 0.0, rms, 1.0)
    return centered / np.asarray(rms)[..., None, None]


def extract_patches(image, coords, a):
    """a x a patches centered on each landmark; coords are pixel (x=col, y=row).

    Out-of-image pixels replicate the nearest edge pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape
    if a > min(H, W):
        raise ValidationError(f"patch size {a} exceeds image size {H}x{W}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    coords = np.asarray(coords, dtype=np.float64)
    cx = np.rint(coords[0]).astype(np.int64)
    cy = np.rint(coords[1]).astype(np.int64)
    off = np.arange(a) - (a - 1) // 2
    rows = np.clip(cy[:, None] + off[None, :], 0, H - 1)  # (n, a)
    cols = np.clip(cx[:, None] + off[None, :], 0, W - 1)
    return image[rows[:, :, None], cols[:, None, :]]


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(sample: LandmarkSample, mirror_map) -> LandmarkSample:
    """Horizontal mirror: x -> 1 - x, left/right landmarks swapped, patches mirrored."""
    if mirror_map is None:
        raise ValidationError("horizontal flip needs a mirror_map")
    mm = np.asarray(mirror_map)
    coords = sample.coords[:, mm].copy()
    coords[0] = 1.0 - coords[0]
    patches = None if sample.patches is None else sample.patches[mm][:, :, ::-1].copy()
    emb = None if sample.embeddings is None else sample.embeddings[mm].copy()
    return replace(sample, coords=normalize_landmarks(coords), patches=patches, embeddings=emb)


def augment_flip(sample, probability=0.25, rng=None, mirror_map=None, force=None):
    """Flip with the given probability. ``force`` overrides the coin toss."""
    fire = force if force is not None else (probability > 0 and rng.random() < probability)
    return flip_sample(sample, mirror_map) if fire else sample


# ---------------------------------------------------------------------------
# synthetic expressions

# left-side points of a frontal face in a [0, 1] frame (y grows downward),
# mirrored to the right; midline points follow
_LEFT = [
    (0.36, 0.40), (0.36, 0.70), (0.30, 0.29), (0.44, 0.41), (0.43, 0.57),
    (0.22, 0.62), (0.43, 0.29), (0.26, 0.40), (0.42, 0.75), (0.30, 0.55),
    (0.32, 0.82), (0.18, 0.45), (0.43, 0.66), (0.40, 0.88), (0.20, 0.30),
]
_MID = [(0.50, 0.78), (0.50, 0.92), (0.50, 0.40), (0.50, 0.66), (0.50, 0.22)]


def face_template(n):
    """(2, n) template with landmark 0 (nose tip) at the centroid, plus the
    mirror permutation."""
    if n < 4:
        raise ValidationError(f"synthetic faces need n >= 4, got {n}")
    m = n - 1
    pairs, mids = m // 2, m % 2
    left = list(_LEFT[:pairs])
    extra = np.random.default_rng(20211).uniform([0.16, 0.18], [0.46, 0.9], size=(max(0, pairs - len(left)), 2))
    left += [tuple(p) for p in extra]
    pts, mirror = [None], [0]
    for x, y in left:
        k = len(pts)
        pts += [(x, y), (1.0 - x, y)]
        mirror += [k + 1, k]
    for x, y in _MID[:mids]:
        mirror.append(len(pts))
        pts.append((x, y))
    others = np.array(pts[1:])
    pts[0] = (0.5, float(others[:, 1].mean()))
    return np.array(pts).T, np.array(mirror, dtype=np.int64)


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 15
    num_classes: int = 4
    samples_per_class: int = 200
    noise_std: float = 0.05
    deform_scale: float = 0.3
    seed: int = 0
    image_size: int = 60
    patch_size: int = 17
    texture_contrast: float = 0.15
    rotation_deg: float = 5.0
    skew: float = 0.0  # 0 = balanced; class c gets (1 - skew)^c of the samples
    mirror_map: tuple | None = None

    def __post_init__(self):
        if self.n < 4:
            raise ValidationError(f"n must be >= 4, got {self.n}")
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ValidationError("need >= 2 classes and >= 1 sample per class")
        if not 0.0 <= self.skew < 1.0:
            raise ValidationError("skew must lie in [0, 1)")
        if self.mirror_map is not None:
            mm = np.asarray(self.mirror_map)
            if sorted(mm.tolist()) != list(range(self.n)) or not np.array_equal(mm[mm], np.arange(self.n)):
                raise ValidationError("mirror_map must be an involutive permutation of 0..n-1")


def _symmetric(values, mirror, sign):
    """Make per-landmark values mirror-consistent: v[mirror[l]] = sign * v[l]."""
    out = values.copy()
    for l, r in enumerate(mirror):
        if l < r:
            out[r] = sign * values[l]
        elif l == r:
            out[l] = 0.0 if sign < 0 else values[l]
    return out


def render_face(px, amplitudes, size, rng, blob_sigma=1.6, pixel_noise=0.03):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.15)
    for (x, y), amp in zip(px.T, amplitudes):
        img += amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * blob_sigma**2))
    img += rng.normal(0.0, pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(config: SyntheticConfig) -> Dataset:
    """Class templates = face template + symmetric class deformation; samples add
    a random similarity transform and Gaussian landmark jitter. Patches come from
    a rendered single-channel image with class-dependent blob intensities."""
    n, k = config.n, config.num_classes
    template, mirror = face_template(n)
    if config.mirror_map is not None:
        mirror = np.asarray(config.mirror_map, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    unit = 0.1  # face-width scale of deformation offsets
    deforms, amps = [], []
    for _ in range(k):
        dx = _symmetric(rng.normal(size=n), mirror, -1.0)
        dy = _symmetric(rng.normal(size=n), mirror, 1.0)
        d = config.deform_scale * unit * np.stack([dx, dy])
        d[:, 0] = 0.0  # nose tip stays put
        deforms.append(d)
        amps.append(np.clip(0.6 + config.texture_contrast * _symmetric(rng.normal(size=n), mirror, 1.0), 0.1, 1.0))

    counts = [max(2, int(round(config.samples_per_class * (1.0 - config.skew) ** c))) for c in range(k)]
    S = config.image_size
    samples = []
    for c in range(k):
        for i in range(counts[c]):
            pts = template + deforms[c] + rng.normal(0.0, config.noise_std, size=(2, n)) * (config.noise_std > 0)
            ang = math.radians(rng.uniform(-config.rotation_deg, config.rotation_deg)) if config.noise_std > 0 else 0.0
            scale = rng.uniform(0.85, 1.05) if config.noise_std > 0 else 1.0
            shift = rng.uniform(-0.04, 0.04, size=(2, 1)) if config.noise_std > 0 else np.zeros((2, 1))
            R = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
            raw = (R @ (pts - 0.5)) * scale + 0.5 + shift
            noise = config.noise_std > 0
            img = render_face(raw * (S - 1), amps[c], S, rng, pixel_noise=0.03 if noise else 0.0)
            patches = extract_patches(img, raw * (S - 1), config.patch_size)
            # archive precision, so in-memory and on-disk datasets agree exactly
            patches = patches.astype(np.float32).astype(np.float64)
            samples.append(LandmarkSample(normalize_landmarks(raw), c, f"s{c}_{i:05d}", patches))
    return Dataset(samples, k, mirror, root=0)


def template_accuracy(dataset: Dataset, templates=None) -> float:
    """Nearest class-mean classifier on normalized coordinates (a separability oracle)."""
    coords, _, y = dataset.arrays()
    X = normalize_landmarks(coords).reshape(len(y), -1)
    if templates is None:
        templates = np.stack([X[y == c].mean(axis=0) for c in range(dataset.num_classes)])
    d = ((X[:, None, :] - templates[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == y).mean())


# ---------------------------------------------------------------------------
# splits


def split(dataset: Dataset, train_fraction: float, seed: int):
    """Stratified, disjoint, deterministic train/validation split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    y = dataset.labels
    train, val = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(y == c)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ValidationError(f"class {c} has fewer than 2 samples")
        idx = rng.permutation(idx)
        cut = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train += idx[:cut].tolist()
        val += idx[cut:].tolist()
    return dataset.subset(sorted(train)), dataset.subset(sorted(val))


# ---------------------------------------------------------------------------
# file formats


def write_landmark_csv(samples, path):
    n = samples[0].n
    header = ["id", "label"] + [f"{a}_{k}" for k in range(n) for a in ("x", "y")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in samples:
            vals = s.coords.T.reshape(-1)
            w.writerow([s.id, s.label] + [repr(float(v)) for v in vals])


def load_landmark_csv(path, normalize=True):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file", 1)
    header = rows[0]
    if header[:2] != ["id", "label"] or (len(header) - 2) % 2 or len(header) < 4:
        raise ParseError(f"{path}: header must be id,label,x_0,y_0,...", 1)
    n = (len(header) - 2) // 2
    expected = ["id", "label"] + [f"{a}_{k}" for k in range(n) for a in ("x", "y")]
    if header != expected:
        raise ParseError(f"{path}: unexpected header columns", 1)
    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 + 2 * n:
            raise ParseError(f"{path}:{lineno}: expected {2 + 2 * n} fields, got {len(row)}", lineno)
        try:
            label = int(row[1])
            vals = np.array([float(v) for v in row[2:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}", lineno) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"{path}:{lineno}: non-finite coordinate", lineno)
        coords = vals.reshape(n, 2).T
        if normalize:
            z = normalize_landmarks(coords)
            # already-normalized files load unchanged so save/load is a fixed point
            coords = coords if np.allclose(z, coords, rtol=0.0, atol=1e-12) else z
        samples.append(LandmarkSample(coords, label, row[0]))
    return samples


def write_patch_archive(samples, directory):
    os.makedirs(directory, exist_ok=True)
    a = samples[0].patches.shape[-1]
    files = {}
    for s in samples:
        fname = f"{s.id}.bin"
        s.patches.astype("<f4").tofile(os.path.join(directory, fname))
        files[s.id] = fname
    manifest = {"num_landmarks": samples[0].n, "patch_size": a, "files": files}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_patch_archive(directory):
    """Returns {sample id: (n, a, a) float64 array}."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    n, a = manifest["num_landmarks"], manifest["patch_size"]
    out = {}
    for sid, fname in manifest["files"].items():
        raw = np.fromfile(os.path.join(directory, fname), dtype="<f4")
        if raw.size != n * a * a:
            raise DimensionError(f"{fname}: expected {n * a * a} floats, got {raw.size}")
        out[sid] = raw.astype(np.float64).reshape(n, a, a)
    return out


def write_embedding_csv(emb, path):
    emb = np.asarray(emb, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"dim_{k}" for k in range(emb.shape[1])])
        for row in emb:
            w.writerow([repr(float(v)) for v in row])


def read_embedding_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != [f"dim_{k}" for k in range(len(rows[0]))]:
        raise ParseError(f"{path}: header must be dim_0..dim_(d-1)", 1)
    d = len(rows[0])
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d:
            raise ParseError(f"{path}:{lineno}: expected {d} values, got {len(row)}", lineno)
        try:
            out.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}", lineno) from None
    return np.array(out)


def save_dataset(dataset: Dataset, directory):
    """Layout: landmarks.csv, patches/ (archive + manifest.json), dataset.json."""
    os.makedirs(directory, exist_ok=True)
    write_landmark_csv(dataset.samples, os.path.join(directory, "landmarks.csv"))
    if all(s.patches is not None for s in dataset.samples):
        write_patch_archive(dataset.samples, os.path.join(directory, "patches"))
    meta = {
        "num_classes": dataset.num_classes,
        "num_landmarks": dataset.n,
        "root": dataset.root,
        "mirror_map": None if dataset.mirror_map is None else [int(v) for v in dataset.mirror_map],
    }
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_dataset(directory, embeddings_dir=None) -> Dataset:
    """Read a dataset directory. ``embeddings_dir`` (one ``<id>.csv`` per sample)
    replaces patches with precomputed per-landmark embeddings."""
    csv_path = os.path.join(directory, "landmarks.csv")
    if not os.path.exists(csv_path):
        raise FileNotFoundError(f"no landmarks.csv in {directory}")
    samples = load_landmark_csv(csv_path)
    meta_path = os.path.join(directory, "dataset.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    ns = {s.n for s in samples}
    if len(ns) != 1:
        raise ValidationError(f"inconsistent landmark counts {sorted(ns)}")
    patch_dir = os.path.join(directory, "patches")
    if embeddings_dir is not None:
        samples = [replace(s, embeddings=read_embedding_csv(os.path.join(embeddings_dir, f"{s.id}.csv"))) for s in samples]
    elif os.path.isdir(patch_dir):
        patches = read_patch_archive(patch_dir)
        missing = [s.id for s in samples if s.id not in patches]
        if missing:
            raise ValidationError(f"no patches for sample {missing[0]!r}")
        samples = [replace(s, patches=patches[s.id]) for s in samples]
    labels = [s.label for s in samples]
    k = int(meta.get("num_classes", max(labels) + 1))
    if max(labels) >= k or min(labels) < 0:
        raise ValidationError(f"labels must lie in 0..{k - 1}")
    mm = meta.get("mirror_map")
    return Dataset(samples, k, None if mm is None else np.array(mm, dtype=np.int64), int(meta.get("root", 0)))
