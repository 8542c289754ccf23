"""Synthetic phantom dataset: generation, serialization, partial-label
simulation, and loading.

A phantom is a 64x64 scene of three foreground structures on background: a
bright disk, the ring (annulus) immediately enclosing it, and a crescent
hugging the ring from outside, mutually disjoint by construction. Images are
16-bit grayscale PNGs, label maps 8-bit indexed PNGs (value 255 = unlabeled),
and a JSON manifest ties records to splits and annotated class sets.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import pathlib
from typing import Mapping

import numpy as np
from PIL import Image

from .labels import SENTINEL, ClassSpace, PartialLabelMap

PHANTOM_CLASSES = ClassSpace(("background", "disk", "annulus", "crescent"))
MANIFEST_VERSION = 1

# Palette for label PNGs: class colors, magenta for the unlabeled sentinel.
_CLASS_COLORS = ((0, 0, 0), (220, 60, 60), (60, 180, 75), (65, 105, 225), (255, 215, 0), (140, 70, 160))


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    image_size: tuple[int, int] = (64, 64)
    disk_radius: tuple[float, float] = (5.0, 9.0)
    ring_width: tuple[float, float] = (3.0, 6.0)
    crescent_radius: tuple[float, float] = (5.0, 8.0)
    center_jitter: float = 5.0
    margin: float = 2.0
    min_structure_pixels: int = 12
    # per-class intensity (mean, std) in [0, 1], plus global additive noise
    intensities: tuple[tuple[float, float], ...] = (
        (0.20, 0.03),
        (0.90, 0.03),
        (0.55, 0.03),
        (0.75, 0.03),
    )
    noise_std: float = 0.02
    max_attempts: int = 100

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError(f"image_size too small for the geometry: {self.image_size}")
        if len(self.intensities) != PHANTOM_CLASSES.num_classes:
            raise ValueError(f"need {PHANTOM_CLASSES.num_classes} intensity entries")
        for lo, hi in (self.disk_radius, self.ring_width, self.crescent_radius):
            if not 0 < lo <= hi:
                raise ValueError("radius/width ranges must satisfy 0 < lo <= hi")


def _draw_geometry(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray | None:
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cx = w / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    r_disk = rng.uniform(*spec.disk_radius)
    r_outer = r_disk + rng.uniform(*spec.ring_width)
    r_cres = rng.uniform(*spec.crescent_radius)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    # Crescent disk overlaps the ring's exclusion circle, so clipping it
    # against that circle leaves a crescent hugging the ring from outside.
    d_center = r_outer + rng.uniform(0.3, 0.7) * r_cres
    c2y = cy + d_center * np.sin(theta)
    c2x = cx + d_center * np.cos(theta)

    if not (
        spec.margin <= cy - r_outer
        and cy + r_outer <= h - spec.margin
        and spec.margin <= cx - r_outer
        and cx + r_outer <= w - spec.margin
        and spec.margin <= c2y - r_cres
        and c2y + r_cres <= h - spec.margin
        and spec.margin <= c2x - r_cres
        and c2x + r_cres <= w - spec.margin
    ):
        return None

    d_main = np.hypot(yy - cy, xx - cx)
    d_cres = np.hypot(yy - c2y, xx - c2x)
    labels = np.zeros((h, w), dtype=np.uint8)
    labels[(d_main > r_disk) & (d_main <= r_outer)] = 2
    labels[d_main <= r_disk] = 1
    crescent = (d_cres <= r_cres) & (d_main > r_outer + 1.0)
    labels[crescent] = 3

    counts = np.bincount(labels.ravel(), minlength=4)
    if (counts[1:] < spec.min_structure_pixels).any():
        return None
    return labels


def render_phantom(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image_uint16, labels_uint8) pair; geometry is rejection-sampled."""
    labels = None
    for _ in range(spec.max_attempts):
        labels = _draw_geometry(spec, rng)
        if labels is not None:
            break
    if labels is None:
        raise RuntimeError(f"no valid phantom geometry after {spec.max_attempts} attempts")
    means = np.array([mu for mu, _ in spec.intensities])
    stds = np.array([sd for _, sd in spec.intensities])
    img = means[labels] + stds[labels] * rng.standard_normal(labels.shape)
    img += spec.noise_std * rng.standard_normal(labels.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 65535.0).astype(np.uint16), labels


def write_image_png(path: pathlib.Path, image: np.ndarray) -> None:
    if image.dtype != np.uint16 or image.ndim != 2:
        raise ValueError(f"expected 2-d uint16 image, got {image.dtype} {image.shape}")
    Image.fromarray(image).save(path, format="PNG")  # uint16 maps to mode I;16


def read_image_png(path: pathlib.Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected grayscale image, got shape {arr.shape}")
    if arr.dtype == np.int32:  # some decoders widen 16-bit grayscale
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{path}: pixel values outside 16-bit range")
    return arr.astype(np.uint16)


def _label_palette(num_classes: int) -> list[int]:
    palette = [0] * (256 * 3)
    for c in range(num_classes):
        palette[3 * c : 3 * c + 3] = _CLASS_COLORS[c % len(_CLASS_COLORS)]
    palette[3 * SENTINEL : 3 * SENTINEL + 3] = (255, 0, 255)
    return palette


def write_label_png(path: pathlib.Path, labels: np.ndarray, num_classes: int) -> None:
    if labels.dtype != np.uint8 or labels.ndim != 2:
        raise ValueError(f"expected 2-d uint8 label map, got {labels.dtype} {labels.shape}")
    im = Image.fromarray(labels, mode="P")
    im.putpalette(_label_palette(num_classes))
    im.save(path, format="PNG")


def read_label_png(path: pathlib.Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path}: expected 8-bit indexed label map, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def _sha256(path: pathlib.Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclasses.dataclass(frozen=True)
class Record:
    record_id: str
    image_path: str  # relative to the manifest directory, posix separators
    label_path: str
    annotated_classes: tuple[int, ...]
    split: str
    image_sha256: str
    label_sha256: str

    def to_json_dict(self) -> dict:
        return {
            "id": self.record_id,
            "image_path": self.image_path,
            "label_path": self.label_path,
            "annotated_classes": list(self.annotated_classes),
            "split": self.split,
            "image_sha256": self.image_sha256,
            "label_sha256": self.label_sha256,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Record":
        return cls(
            record_id=d["id"],
            image_path=d["image_path"],
            label_path=d["label_path"],
            annotated_classes=tuple(int(c) for c in d["annotated_classes"]),
            split=d["split"],
            image_sha256=d["image_sha256"],
            label_sha256=d["label_sha256"],
        )


def write_manifest(path: pathlib.Path, space: ClassSpace, records: list[Record], seed: int | None) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "class_space": {"class_names": list(space.class_names)},
        "seed": seed,
        "records": [r.to_json_dict() for r in records],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: pathlib.Path) -> tuple[ClassSpace, list[Record]]:
    payload = json.loads(pathlib.Path(path).read_text())
    version = payload.get("version")
    if version != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {version!r}")
    space = ClassSpace(tuple(payload["class_space"]["class_names"]))
    return space, [Record.from_json_dict(d) for d in payload["records"]]


def generate_phantoms(
    out_dir: str | pathlib.Path,
    counts: Mapping[str, int] | int,
    seed: int,
    spec: PhantomSpec = PhantomSpec(),
) -> pathlib.Path:
    """Write a phantom dataset (images/, labels/, manifest.json) and return
    the manifest path. Fixed seed gives byte-identical files on rerun."""
    if isinstance(counts, int):
        counts = {"train": counts}
    for split, n in counts.items():
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        if n < 0:
            raise ValueError(f"negative count for split {split!r}")
    out_dir = pathlib.Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    records = []
    index = 0
    full = tuple(range(PHANTOM_CLASSES.num_classes))
    for split in ("train", "val", "test"):
        for _ in range(counts.get(split, 0)):
            image, labels = render_phantom(spec, rng)
            rid = f"phantom_{index:05d}"
            image_rel = f"images/{rid}.png"
            label_rel = f"labels/{rid}.png"
            write_image_png(out_dir / image_rel, image)
            write_label_png(out_dir / label_rel, labels, PHANTOM_CLASSES.num_classes)
            records.append(
                Record(
                    record_id=rid,
                    image_path=image_rel,
                    label_path=label_rel,
                    annotated_classes=full,
                    split=split,
                    image_sha256=_sha256(out_dir / image_rel),
                    label_sha256=_sha256(out_dir / label_rel),
                )
            )
            index += 1
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, PHANTOM_CLASSES, records, seed)
    return manifest


def _parse_policy(policy: str, num_foreground: int) -> tuple[str, float]:
    if policy in ("one_label_round_robin", "one_label_random"):
        return policy, 0.0
    if policy.startswith("ratio:"):
        frac = float(policy.split(":", 1)[1])
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"full fraction must lie in [0, 1], got {frac}")
        return "ratio", frac
    raise ValueError(
        f"unknown policy {policy!r}; expected one_label_round_robin, one_label_random, or ratio:<fraction-full>"
    )


def simulate_partial(
    manifest_path: str | pathlib.Path,
    policy: str,
    seed: int,
    out_manifest: str = "manifest_partial.json",
) -> pathlib.Path:
    """Reduce fully annotated train records to partial ones.

    one_label_* keeps exactly one foreground class per train record (cycling
    classes in manifest order, or drawing them at random); ratio:<f> keeps a
    seeded random fraction f of train records fully annotated and one-labels
    the rest round-robin. New label PNGs are written next to the originals;
    image files and non-train records are never touched.
    """
    manifest_path = pathlib.Path(manifest_path)
    root = manifest_path.parent
    space, records = read_manifest(manifest_path)
    fg = space.foreground
    kind, frac = _parse_policy(policy, len(fg))
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    train_pos = [i for i, r in enumerate(records) if r.split == "train"]
    for i in train_pos:
        if len(records[i].annotated_classes) != space.num_classes:
            raise ValueError(f"record {records[i].record_id} is not fully annotated; cannot simulate")

    keep_full: set[int] = set()
    if kind == "ratio":
        n_full = int(round(frac * len(train_pos)))
        order = rng.permutation(len(train_pos))
        keep_full = {train_pos[int(j)] for j in order[:n_full]}

    label_dir = root / f"labels_{policy.replace(':', '_')}"
    new_records = list(records)
    partial_counter = 0
    for i in train_pos:
        rec = records[i]
        if i in keep_full:
            continue
        if kind == "one_label_random":
            k = int(fg[int(rng.integers(len(fg)))])
        else:  # round-robin over foreground classes, by train order
            k = int(fg[partial_counter % len(fg)])
        partial_counter += 1
        labels = read_label_png(root / rec.label_path)
        reduced = np.full(labels.shape, SENTINEL, dtype=np.uint8)
        reduced[labels == k] = k
        label_dir.mkdir(parents=True, exist_ok=True)
        rel = f"{label_dir.name}/{rec.record_id}.png"
        write_label_png(root / rel, reduced, space.num_classes)
        new_records[i] = dataclasses.replace(
            rec, label_path=rel, annotated_classes=(k,), label_sha256=_sha256(root / rel)
        )

    out_path = root / out_manifest
    write_manifest(out_path, space, new_records, seed)
    return out_path


def normalize_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Zero-mean, unit-variance float32 version of a raw intensity image."""
    x = image.astype(np.float64)
    std = x.std()
    if std < 1e-8:
        raise ValueError(f"{name}: constant image cannot be normalized")
    return ((x - x.mean()) / std).astype(np.float32)


class Dataset:
    """In-memory view of a dataset: normalized images, partial label maps,
    split membership, and the per-class index used for conditional sampling.

    ``expand_full_train=True`` replaces each fully annotated train record by
    one virtual one-label record per class (background included), which is how
    fully supervised images enter the one-label training scheme.
    """

    def __init__(
        self,
        space: ClassSpace,
        images: list[np.ndarray],
        label_maps: list[PartialLabelMap],
        splits: list[str],
        ids: list[str],
        root: pathlib.Path | None = None,
    ):
        if not (len(images) == len(label_maps) == len(splits) == len(ids)):
            raise ValueError("images/labels/splits/ids length mismatch")
        self.space = space
        self.images = images
        self.label_maps = label_maps
        self.splits = splits
        self.ids = ids
        self.root = root
        self._annotated_index: dict[int, list[int]] | None = None

    def __len__(self) -> int:
        return len(self.images)

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def label_map(self, i: int) -> PartialLabelMap:
        return self.label_maps[i]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def annotated_index(self) -> dict[int, list[int]]:
        """Train-split sample indices per annotated class."""
        if self._annotated_index is None:
            index: dict[int, list[int]] = {c: [] for c in range(self.space.num_classes)}
            for i in self.indices("train"):
                for c in sorted(self.label_maps[i].annotated_classes):
                    index[c].append(i)
            self._annotated_index = index
        return self._annotated_index

    def conditional_classes(self) -> tuple[int, ...]:
        """Foreground classes, plus background when any train record annotates it."""
        classes = list(self.space.foreground)
        if self.annotated_index()[0]:
            classes = [0] + classes
        return tuple(classes)

    @classmethod
    def from_arrays(
        cls,
        images: list[np.ndarray] | np.ndarray,
        label_maps: list[PartialLabelMap],
        splits: list[str] | None = None,
        space: ClassSpace | None = None,
        normalize: bool = True,
    ) -> "Dataset":
        if space is None:
            m = label_maps[0].num_classes
            space = ClassSpace(tuple(f"class_{c}" for c in range(m)))
        imgs = []
        for i, img in enumerate(images):
            arr = np.asarray(img)
            imgs.append(normalize_image(arr, f"image[{i}]") if normalize else arr.astype(np.float32))
        splits = list(splits) if splits is not None else ["train"] * len(imgs)
        ids = [f"array_{i:05d}" for i in range(len(imgs))]
        return cls(space, imgs, list(label_maps), splits, ids)


def _expand_full_train(ds: Dataset) -> Dataset:
    from .pairing import split_full_labels

    images, labels, splits, ids = [], [], [], []
    for i in range(len(ds)):
        lm = ds.label_maps[i]
        if ds.splits[i] == "train" and lm.is_full:
            for k, one in enumerate(split_full_labels(lm)):
                images.append(ds.images[i])
                labels.append(one)
                splits.append("train")
                ids.append(f"{ds.ids[i]}#cls{k}")
        else:
            images.append(ds.images[i])
            labels.append(lm)
            splits.append(ds.splits[i])
            ids.append(ds.ids[i])
    return Dataset(ds.space, images, labels, splits, ids, root=ds.root)


def load_dataset(
    manifest_path: str | pathlib.Path,
    expand_full_train: bool = False,
    verify_checksums: bool = True,
) -> Dataset:
    """Load a manifest into memory, verifying file hashes and shapes."""
    manifest_path = pathlib.Path(manifest_path)
    root = manifest_path.parent
    space, records = read_manifest(manifest_path)
    images, labels, splits, ids = [], [], [], []
    for rec in records:
        img_path = root / rec.image_path
        lab_path = root / rec.label_path
        if verify_checksums:
            for path, want in ((img_path, rec.image_sha256), (lab_path, rec.label_sha256)):
                got = _sha256(path)
                if got != want:
                    raise ValueError(f"record {rec.record_id}: checksum mismatch for {path.name}")
        raw = read_image_png(img_path)
        lab = read_label_png(lab_path)
        if raw.shape != lab.shape:
            raise ValueError(f"record {rec.record_id}: image shape {raw.shape} != label shape {lab.shape}")
        images.append(normalize_image(raw, rec.record_id))
        labels.append(
            PartialLabelMap(
                labels=lab,
                annotated_classes=frozenset(rec.annotated_classes),
                num_classes=space.num_classes,
            )
        )
        splits.append(rec.split)
        ids.append(rec.record_id)
    ds = Dataset(space, images, labels, splits, ids, root=root)
    return _expand_full_train(ds) if expand_full_train else ds
