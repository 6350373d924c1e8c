"""Dataset ingestion, image files, and the train/val/test protocol.

A dataset directory is defined by its `manifest.csv` with the columns
`path,class,sample_set,gsd_px_per_mm`. Images are 3-channel PNG files
(8- or 16-bit); the manifest, not directory order, fixes sample order.
Physically distinct aggregate fillings are tagged S1 or S2: S1 provides
training and validation, S2 is reserved for testing, so the network can
never memorize individual particles across the split boundary.
"""

from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import ContractError, DataError
from .geometry import RectifiedImage, resample_gsd
from .model import CANONICAL_NINE, GradingCurveLabel

SIEVE_BINS_MM = ((0.0, 2.0), (2.0, 8.0), (8.0, 16.0), (16.0, 32.0))

CLASS_FILE_NAME = "classes.txt"


@dataclass(frozen=True)
class ClassSpec:
    """A grading curve: mass fraction per sieve bin (0-2, 2-8, 8-16, 16-32 mm)."""

    name: str
    fractions: tuple

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != len(SIEVE_BINS_MM):
            raise ContractError(
                f"class {self.name!r}: need {len(SIEVE_BINS_MM)} fractions, got {len(fr)}")
        if any(f < 0 for f in fr):
            raise ContractError(f"class {self.name!r}: negative mass fraction")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ContractError(
                f"class {self.name!r}: fractions sum to {sum(fr)!r}, expected 1")
        object.__setattr__(self, "fractions", fr)


@dataclass(frozen=True)
class LabeledSample:
    image: RectifiedImage
    label: GradingCurveLabel
    sample_set: str
    source_id: str


@dataclass(frozen=True)
class SplitProtocol:
    """Index lists into a dataset's sample sequence."""

    train: tuple
    val: tuple
    test: tuple

    def assert_disjoint(self):
        t, v, s = set(self.train), set(self.val), set(self.test)
        if t & v or t & s or v & s:
            raise ContractError("split index lists overlap")


class Dataset:
    """Immutable sample container with the class list it was loaded under."""

    def __init__(self, samples, classes):
        self.samples = tuple(samples)
        self.classes = tuple(classes)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def class_index(self, name):
        return self.classes.index(name) + 1

    def summary(self):
        """Per-class, per-set count table plus the total."""
        counts = {(c, s): 0 for c in self.classes for s in ("S1", "S2")}
        for smp in self.samples:
            counts[(smp.label.name, smp.sample_set)] += 1
        width = max([5] + [len(c) for c in self.classes])
        lines = [f"{'class':<{width}}  {'S1':>4}  {'S2':>4}"]
        for c in self.classes:
            lines.append(f"{c:<{width}}  {counts[(c, 'S1')]:>4}  {counts[(c, 'S2')]:>4}")
        lines.append(f"total {len(self.samples)}")
        return "\n".join(lines)


def read_image(path):
    """Load a 3-channel PNG as float64 RGB in [0, 1]; 8- and 16-bit accepted."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(
            f"{path}: expected 3 channels, got shape {raw.shape}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataError(f"{path}: unsupported sample type {raw.dtype}")
    return raw[:, :, ::-1].astype(np.float64) / scale


def write_image(path, pixels, bits=16):
    """Store an RGB [0, 1] array as PNG with the requested bit depth."""
    if bits not in (8, 16):
        raise ContractError(f"bit depth must be 8 or 16, got {bits}")
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"expected (h, w, 3) pixels, got shape {arr.shape}")
    scale = 255.0 if bits == 8 else 65535.0
    dtype = np.uint8 if bits == 8 else np.uint16
    coded = np.round(arr * scale).astype(dtype)
    if not cv2.imwrite(str(path), coded[:, :, ::-1]):
        raise DataError(f"cannot write image {path}")


def load_class_specs(path):
    """Parse a class-spec file: `name f(0-2) f(2-8) f(8-16) f(16-32)` per line."""
    specs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 5:
                raise DataError(
                    f"{path}:{lineno}: expected 'name f f f f', got {len(fields)} fields")
            try:
                spec = ClassSpec(name=fields[0],
                                 fractions=tuple(float(f) for f in fields[1:]))
            except (ValueError, ContractError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            specs.append(spec)
    if not specs:
        raise DataError(f"{path}: no class specs found")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate class names")
    return specs


def load_dataset(root, classes=None):
    """Read every sample listed in `root/manifest.csv`.

    `classes` fixes the recognized class list (order = label index order).
    When omitted, a `classes.txt` spec file in the root defines it, and
    the canonical nine-class list is the fallback. Rows with unknown
    classes, bad sets, or unreadable images are reported together.
    """
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"missing manifest: {manifest}")
    if classes is None:
        spec_file = root / CLASS_FILE_NAME
        if spec_file.is_file():
            classes = [s.name for s in load_class_specs(spec_file)]
        else:
            classes = list(CANONICAL_NINE)
    classes = tuple(classes)
    samples, problems = [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"path", "class", "sample_set", "gsd_px_per_mm"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise DataError(
                f"{manifest}: header must contain {sorted(need)}, "
                f"got {reader.fieldnames}")
        for rowno, row in enumerate(reader, start=2):
            where = f"{manifest}:{rowno}"
            cname = (row["class"] or "").strip()
            sset = (row["sample_set"] or "").strip()
            if cname not in classes:
                problems.append(f"{where}: unknown class {cname!r}")
                continue
            if sset not in ("S1", "S2"):
                problems.append(f"{where}: sample_set must be S1 or S2, got {sset!r}")
                continue
            try:
                gsd = float(row["gsd_px_per_mm"])
                if not np.isfinite(gsd) or gsd <= 0:
                    raise ValueError(f"gsd must be positive, got {gsd}")
            except ValueError as exc:
                problems.append(f"{where}: {exc}")
                continue
            img_path = root / row["path"]
            try:
                pixels = read_image(img_path)
            except DataError as exc:
                problems.append(str(exc))
                continue
            h, w = pixels.shape[:2]
            image = RectifiedImage(
                pixels=pixels, gsd=gsd, extent_mm=(w / gsd, h / gsd),
                valid=np.ones((h, w), dtype=bool))
            index = classes.index(cname) + 1
            samples.append(LabeledSample(
                image=image,
                label=GradingCurveLabel(index=index, name=cname),
                sample_set=sset,
                source_id=row["path"],
            ))
    if problems:
        raise DataError("dataset problems:\n" + "\n".join(problems))
    if not samples:
        warnings.warn(f"{manifest}: manifest lists no samples", stacklevel=2)
    return Dataset(samples, classes)


def resample_samples(samples, gsd):
    """Bring every sample to the target scale; same-scale images pass through."""
    out = []
    for smp in samples:
        if abs(smp.image.gsd - gsd) < 1e-12:
            out.append(smp)
        else:
            out.append(dataclasses.replace(smp, image=resample_gsd(smp.image, gsd)))
    return out


def make_splits(dataset: Dataset, seed, strict=False):
    """S1 into train/val per class by seeded shuffle, all of S2 into test.

    Validation takes round(n * 6/50) of each class's S1 images (the
    published 44:6 ratio), at least one image staying in train. With
    `strict` on, classes holding fewer than 50 S1 images are rejected.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    per_class = {c: [] for c in dataset.classes}
    test = []
    for i, smp in enumerate(dataset.samples):
        if smp.sample_set == "S2":
            test.append(i)
        else:
            per_class[smp.label.name].append(i)
    train, val = [], []
    for c in dataset.classes:
        idx = per_class[c]
        if strict and len(idx) < 50:
            raise DataError(
                f"class {c!r} has {len(idx)} S1 images, need 50 in strict mode")
        if not idx:
            continue
        order = rng.permutation(len(idx))
        shuffled = [idx[k] for k in order]
        n_val = min(int(len(idx) * 6 / 50 + 0.5), len(idx) - 1)
        val.extend(shuffled[:n_val])
        train.extend(shuffled[n_val:])
    split = SplitProtocol(train=tuple(sorted(train)), val=tuple(sorted(val)),
                          test=tuple(sorted(test)))
    split.assert_disjoint()
    for i in split.train + split.val:
        if dataset.samples[i].sample_set != "S1":
            raise ContractError("S2 sample leaked into train/val")
    return split
