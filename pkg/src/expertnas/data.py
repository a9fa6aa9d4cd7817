"""Synthetic grouped binary-classification data and external-manifest ingestion.

Label-1 images hold a Gaussian "figure" blob over a striped distractor
texture; label-0 images hold the texture only. The blob's contrast falls
with the group index (group 1 lightest, group 10 darkest), so higher groups
are genuinely harder. A per-image lighting factor scales the clean scene
before noise, and the test split uses stronger noise plus a contrast jitter
so validation and test accuracy can diverge.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blobfile

SPLITS = ("train", "val", "test")
N_GROUPS = 10


class DatasetError(ValueError):
    """Base class for dataset construction and loading failures."""


class GroupCountError(DatasetError):
    pass


class EmptySubsetError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class MissingImageError(DatasetError):
    pass


class MalformedRowError(DatasetError):
    pass


class UnknownSplitError(DatasetError):
    pass


class GroupRangeError(DatasetError):
    def __init__(self, rows: list[int]):
        self.rows = rows
        super().__init__(f"group outside 1..{N_GROUPS} in manifest rows {rows}")


@dataclass
class DatasetSpec:
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 2000
    image_size: int = 16
    channels: int = 1
    n_groups: int = N_GROUPS
    # relative sampling weight per group; the lightest weight defines the minority
    group_weights: list[float] = field(default_factory=lambda: [1.0] * 9 + [0.5])
    lighting_min: float = 0.2
    lighting_max: float = 1.0
    contrast_light: float = 0.50
    contrast_dark: float = 0.20
    noise_train: float = 0.05
    noise_test: float = 0.10
    contrast_jitter_test: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_groups != N_GROUPS or len(self.group_weights) != N_GROUPS:
            raise GroupCountError(f"the fairness metric is defined over {N_GROUPS} groups, got "
                                  f"n_groups={self.n_groups} with {len(self.group_weights)} weights")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise DatasetError("split counts must be positive")
        if any(w <= 0 for w in self.group_weights):
            raise DatasetError("group weights must be positive")
        if not 0 < self.lighting_min <= self.lighting_max <= 1:
            raise DatasetError("lighting range must satisfy 0 < min <= max <= 1")

    @property
    def minority_group(self) -> int:
        """Group with the smallest weight; ties go to the higher (darker) group."""
        w = np.asarray(self.group_weights)
        return int(np.flatnonzero(w == w.min())[-1]) + 1

    def counts(self, split: str) -> np.ndarray:
        """Per-group sample counts for a split by largest-remainder allocation."""
        n = {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]
        w = np.asarray(self.group_weights, dtype=np.float64)
        ideal = n * w / w.sum()
        base = np.floor(ideal).astype(np.int64)
        rem = n - int(base.sum())
        # stable order: largest fractional part first, lower group first on ties
        order = sorted(range(len(w)), key=lambda i: (-(ideal[i] - base[i]), i))
        for i in order[:rem]:
            base[i] += 1
        return base

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Split:
    name: str
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int
    groups: np.ndarray  # (N,) int in 1..10
    lighting: np.ndarray  # (N,) float in (0, 1]
    ids: np.ndarray  # (N,) globally unique sample ids

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask: np.ndarray, name: str | None = None) -> "Split":
        return Split(name or self.name, self.images[mask], self.labels[mask], self.groups[mask],
                     self.lighting[mask], self.ids[mask])


@dataclass
class Dataset:
    splits: dict[str, Split]
    spec: DatasetSpec | None = None

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    @property
    def test(self) -> Split:
        return self.splits["test"]

    def __len__(self) -> int:
        return sum(len(s) for s in self.splits.values())


# -- scene rendering -----------------------------------------------------------


def group_contrast(spec: DatasetSpec, group: int) -> float:
    """Blob contrast, decreasing linearly from group 1 to group 10."""
    frac = (group - 1) / (N_GROUPS - 1)
    return spec.contrast_light + frac * (spec.contrast_dark - spec.contrast_light)


def render_scene(size: int, label: int, contrast: float, rng: np.random.Generator) -> np.ndarray:
    """Clean (pre-lighting, pre-noise) scene of shape (size, size)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    background = rng.uniform(0.3, 0.5)
    amp = rng.uniform(0.04, 0.12)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(0.5, 1.2)
    phase = rng.uniform(0.0, 2 * np.pi)
    scene = background + amp * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    # draw blob parameters for both labels so the rng stream does not depend on the label
    cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
    radius = rng.uniform(1.5, 2.5)
    if label == 1:
        scene = scene + contrast * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius ** 2))
    return scene


def apply_lighting(scene: np.ndarray, lighting: float) -> np.ndarray:
    return scene * lighting


def _render_split(spec: DatasetSpec, split: str, rng: np.random.Generator, id_offset: int) -> Split:
    counts = spec.counts(split)
    groups = np.concatenate([np.full(c, g + 1, dtype=np.int64) for g, c in enumerate(counts)])
    labels = np.concatenate([np.arange(c, dtype=np.int64) % 2 for c in counts])
    order = rng.permutation(len(groups))
    groups, labels = groups[order], labels[order]
    n, s, ch = len(groups), spec.image_size, spec.channels
    lighting = rng.uniform(spec.lighting_min, spec.lighting_max, size=n)
    # uniform draws live on [min, max); keep lighting strictly positive and <= 1
    lighting = np.clip(lighting, 1e-6, 1.0)
    images = np.empty((n, s, s, ch))
    is_test = split == "test"
    noise = spec.noise_test if is_test else spec.noise_train
    for i in range(n):
        scene = apply_lighting(render_scene(s, int(labels[i]), group_contrast(spec, int(groups[i])), rng),
                               lighting[i])
        if is_test and spec.contrast_jitter_test:
            m = scene.mean()
            scene = m + (scene - m) * (1.0 + rng.uniform(-spec.contrast_jitter_test, spec.contrast_jitter_test))
        img = scene[..., None] + rng.normal(0.0, noise, size=(s, s, ch))
        images[i] = np.clip(img, 0.0, 1.0)
    return Split(split, images, labels, groups, lighting, np.arange(id_offset, id_offset + n, dtype=np.int64))


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    splits = {}
    offset = 0
    for k, name in enumerate(SPLITS):
        # independent stream per split so split sizes don't perturb each other
        rng = np.random.default_rng([spec.seed, k])
        splits[name] = _render_split(spec, name, rng, offset)
        offset += len(splits[name])
    return Dataset(splits, spec)


def poorly_lit_subset(split: Split | Dataset, threshold: float) -> Split:
    """Samples with lighting strictly below ``threshold`` (test split when given a dataset)."""
    if isinstance(split, Dataset):
        split = split.test
    if not 0 < threshold <= 1:
        raise DatasetError(f"light threshold must lie in (0, 1], got {threshold}")
    sub = split.subset(split.lighting < threshold, name=f"{split.name}_poorly_lit")
    if len(sub) == 0:
        raise EmptySubsetError(f"no {split.name} samples with lighting < {threshold}")
    return sub


# -- archives ------------------------------------------------------------------


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if ds.spec is not None:
        (d / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    for name, sp in ds.splits.items():
        (d / f"{name}.bin").write_bytes(
            blobfile.encode({"kind": "dataset_split", "split": name}, [("images", sp.images)]))
    with open(d / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "index", "id", "label", "group", "lighting"])
        for name, sp in ds.splits.items():
            for i in range(len(sp)):
                w.writerow([name, i, int(sp.ids[i]), int(sp.labels[i]), int(sp.groups[i]), repr(float(sp.lighting[i]))])


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / "metadata.csv").exists():
        raise MissingImageError(f"{d} has no metadata.csv")
    spec = DatasetSpec.from_dict(json.loads((d / "spec.json").read_text())) if (d / "spec.json").exists() else None
    meta: dict[str, list] = {}
    with open(d / "metadata.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            meta.setdefault(row["split"], []).append(row)
    splits = {}
    for name, rows in meta.items():
        manifest, arrays = blobfile.decode((d / f"{name}.bin").read_bytes())
        images = arrays["images"]
        if len(images) != len(rows):
            raise MalformedRowError(f"{name}: {len(images)} images but {len(rows)} metadata rows")
        splits[name] = Split(
            name, images,
            np.array([int(r["label"]) for r in rows], dtype=np.int64),
            np.array([int(r["group"]) for r in rows], dtype=np.int64),
            np.array([float(r["lighting"]) for r in rows]),
            np.array([int(r["id"]) for r in rows], dtype=np.int64))
    return Dataset(splits, spec)


_MANIFEST_COLUMNS = ("image_path", "label", "group", "lighting", "split")


def ingest_external(manifest_path) -> Dataset:
    """Load a CSV manifest of external images (``image_path,label,group,lighting,split``)."""
    from PIL import Image

    path = Path(manifest_path)
    if not path.exists():
        raise MissingImageError(f"manifest {path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyDatasetError(f"manifest {path} is empty")
        missing = [c for c in _MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise MalformedRowError(f"manifest missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise EmptyDatasetError(f"manifest {path} has no rows")

    parsed = []
    bad_groups = []
    for rownum, r in enumerate(rows, start=2):  # header is line 1
        try:
            label, group, light = int(r["label"]), int(r["group"]), float(r["lighting"])
        except (TypeError, ValueError):
            raise MalformedRowError(f"row {rownum}: cannot parse label/group/lighting from {r}") from None
        if label not in (0, 1) or not 0 < light <= 1:
            raise MalformedRowError(f"row {rownum}: label must be 0/1 and lighting in (0, 1]")
        if r["split"] not in SPLITS:
            raise UnknownSplitError(f"row {rownum}: unknown split {r['split']!r}")
        if not 1 <= group <= N_GROUPS:
            bad_groups.append(rownum)
        parsed.append((rownum, r["image_path"], label, group, light, r["split"]))
    if bad_groups:
        raise GroupRangeError(bad_groups)

    by_split: dict[str, list] = {}
    shape = None
    for uid, (rownum, img_path, label, group, light, split) in enumerate(parsed):
        p = Path(img_path)
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise MissingImageError(f"row {rownum}: image {p} not found")
        with Image.open(p) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[..., None]
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise MalformedRowError(f"row {rownum}: image shape {arr.shape} differs from {shape}")
        by_split.setdefault(split, []).append((arr, label, group, light, uid))

    splits = {}
    for name in SPLITS:
        items = by_split.get(name)
        if not items:
            continue
        splits[name] = Split(name,
                             np.stack([it[0] for it in items]),
                             np.array([it[1] for it in items], dtype=np.int64),
                             np.array([it[2] for it in items], dtype=np.int64),
                             np.array([it[3] for it in items]),
                             np.array([it[4] for it in items], dtype=np.int64))
    return Dataset(splits, None)


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    for name in sorted(ds.splits):
        sp = ds.splits[name]
        for arr in (sp.images, sp.labels, sp.groups, sp.lighting, sp.ids):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def describe(ds: Dataset) -> str:
    parts = [f"{n}={len(s)}" for n, s in ds.splits.items()]
    return "dataset(" + ", ".join(parts) + ")"
