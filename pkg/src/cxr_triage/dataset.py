"""Manifest construction, patient-wise splitting and image preprocessing.

Two sources are ingested:

* a COVID-19 collection: an image directory plus a metadata table with
  patient id, view/projection and finding columns;
* a pneumonia collection laid out as ``<split>/<CLASS>/<file>``, where the
  class folder is NORMAL, BACTERIA, VIRUS, or PNEUMONIA (in which case the
  bacterial/viral label is read from the file name).

By default every source split is discarded and re-assigned by
:func:`split_by_patient`; ``keep_labels`` preserves the pneumonia
collection's own folders instead.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from .classes import BACTERIAL, COVID, NORMAL, RAW_LABELS, VIRAL, ClassConfig

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("image_path", "patient_id", "label", "split")

# Projections accepted as frontal; lateral ("L"), axial CT, etc. are dropped.
FRONTAL_VIEWS = {"PA", "AP", "AP SUPINE", "AP SEMI ERECT", "AP ERECT", "APS"}
IMAGE_SUFFIXES = {".jpeg", ".jpg", ".png", ".bmp", ".tif", ".tiff"}

# ImageNet statistics; the pretrained backbone was trained with them.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(RuntimeError):
    """Fatal ingestion problem (unreadable metadata, empty source...)."""


class SplitError(ValueError):
    pass


class ImageDecodeError(OSError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}" + (f": {reason}" if reason else ""))


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    patient_id: str
    label: str
    split: str = "train"

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError(f"empty patient_id for {self.image_path}")
        if self.label not in RAW_LABELS:
            raise ValueError(f"unknown label {self.label!r} for {self.image_path}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r} for {self.image_path}")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    rejects: list[tuple[str, str]] = field(default_factory=list)

    @property
    def class_counts(self) -> dict[str, tuple[int, int, int]]:
        """class -> (train, val, test) image counts, recomputed from records."""
        counts = {label: [0, 0, 0] for label in RAW_LABELS}
        for r in self.records:
            counts[r.label][SPLITS.index(r.split)] += 1
        return {label: tuple(c) for label, c in counts.items()}

    def patient_counts(self) -> dict[str, tuple[int, int, int]]:
        seen = {label: [set(), set(), set()] for label in RAW_LABELS}
        for r in self.records:
            seen[r.label][SPLITS.index(r.split)].add(r.patient_id)
        return {label: tuple(len(s) for s in sets) for label, sets in seen.items()}

    def subset(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def check_patient_integrity(self) -> list[str]:
        """Patient ids that occur in more than one split."""
        splits = defaultdict(set)
        for r in self.records:
            splits[r.patient_id].add(r.split)
        return sorted(p for p, s in splits.items() if len(s) > 1)


# --------------------------------------------------------------------------- #
# Ingestion
# --------------------------------------------------------------------------- #

def _pick_column(header: Sequence[str], *candidates: str) -> str | None:
    lowered = {h.strip().lower(): h for h in header}
    for c in candidates:
        if c in lowered:
            return lowered[c]
    return None


def _read_covid_metadata(covid_dir: Path, metadata: Path | None):
    metadata = Path(metadata) if metadata is not None else covid_dir / "metadata.csv"
    try:
        with open(metadata, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = reader.fieldnames or []
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise ManifestError(f"cannot read COVID metadata table {metadata}: {exc}") from exc
    cols = {
        "patient": _pick_column(header, "patientid", "patient_id", "patient id"),
        "view": _pick_column(header, "view", "projection"),
        "finding": _pick_column(header, "finding", "label"),
        "filename": _pick_column(header, "filename", "file", "image"),
    }
    missing = [k for k, v in cols.items() if v is None]
    if missing:
        raise ManifestError(f"metadata table {metadata} lacks columns for: {', '.join(missing)}")
    cols["folder"] = _pick_column(header, "folder")
    cols["modality"] = _pick_column(header, "modality")
    return rows, cols


def _ingest_covid(covid_dir: Path, metadata: Path | None, rejects: list, excluded: Counter):
    rows, cols = _read_covid_metadata(covid_dir, metadata)
    records = []
    for row in rows:
        finding = (row[cols["finding"]] or "").strip()
        if "covid-19" not in finding.lower() and "covid19" not in finding.lower():
            excluded["finding not COVID-19"] += 1
            continue
        if cols["modality"] and (row[cols["modality"]] or "").strip().lower() not in ("", "x-ray", "xray"):
            excluded["not an X-ray"] += 1
            continue
        view = " ".join((row[cols["view"]] or "").replace(",", " ").split()).upper()
        if view not in FRONTAL_VIEWS:
            excluded["non-frontal view"] += 1
            continue
        patient = (row[cols["patient"]] or "").strip()
        fname = (row[cols["filename"]] or "").strip()
        if not patient or not fname:
            rejects.append((fname or "<blank>", "missing patient id or filename in metadata"))
            continue
        folder = (row[cols["folder"]] or "").strip() if cols["folder"] else "images"
        candidates = [covid_dir / folder / fname, covid_dir / fname]
        path = next((p for p in candidates if p.is_file()), None)
        if path is None:
            rejects.append((str(candidates[0]), "image file not found"))
            continue
        records.append(ImageRecord(str(path), f"covid:{patient}", COVID))
    return records


_PNEU_FOLDERS = {"NORMAL": NORMAL, "BACTERIA": BACTERIAL, "BACTERIAL": BACTERIAL,
                 "VIRUS": VIRAL, "VIRAL": VIRAL}
_PERSON_RE = re.compile(r"^(person\d+)_", re.IGNORECASE)
_STUDY_RE = re.compile(r"^((?:NORMAL\d*-)?IM-\d+)-\d+", re.IGNORECASE)


def pneumonia_patient_id(filename: str) -> str:
    """Patient key encoded in a pneumonia-dataset file name.

    ``person1_bacteria_1.jpeg`` -> ``person1``; ``IM-0115-0001.jpeg`` ->
    ``IM-0115``; anything else falls back to the file stem.
    """
    stem = Path(filename).stem
    for pattern in (_PERSON_RE, _STUDY_RE):
        m = pattern.match(stem)
        if m:
            return m.group(1)
    return stem


def _pneumonia_label(folder: str, filename: str) -> str | None:
    key = folder.upper()
    if key in _PNEU_FOLDERS:
        return _PNEU_FOLDERS[key]
    if key == "PNEUMONIA":
        name = filename.lower()
        if "bacteria" in name:
            return BACTERIAL
        if "virus" in name:
            return VIRAL
    return None


def _ingest_pneumonia(root: Path, rejects: list, excluded: Counter):
    records = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        label = _pneumonia_label(path.parent.name, path.name)
        if label is None:
            rejects.append((str(path), f"cannot infer class from folder {path.parent.name!r}"))
            continue
        source_split = path.parent.parent.name.lower()
        split = source_split if source_split in SPLITS else "train"
        pid = "pneumonia:" + pneumonia_patient_id(path.name)
        records.append(ImageRecord(str(path), pid, label, split))
    if not records:
        excluded["empty pneumonia tree"] += 1
    return records


def build_manifest(covid_dir, pneumonia_dir, covid_metadata=None) -> DatasetManifest:
    """Ingest both sources into one manifest.

    Missing images land in ``manifest.rejects``; an unreadable metadata
    table or a source with no usable images raises :class:`ManifestError`.
    """
    covid_dir, pneumonia_dir = Path(covid_dir), Path(pneumonia_dir)
    for d in (covid_dir, pneumonia_dir):
        if not d.is_dir():
            raise ManifestError(f"source directory {d} does not exist")
    rejects: list[tuple[str, str]] = []
    excluded: Counter = Counter()
    covid = _ingest_covid(covid_dir, covid_metadata, rejects, excluded)
    pneumonia = _ingest_pneumonia(pneumonia_dir, rejects, excluded)
    if not covid:
        raise ManifestError(f"no usable COVID-19 frontal images under {covid_dir}")
    if not pneumonia:
        raise ManifestError(f"no images found under pneumonia source {pneumonia_dir}")
    for reason, n in sorted(excluded.items()):
        log.info("excluded %d rows: %s", n, reason)
    if rejects:
        log.warning("%d records rejected during ingestion", len(rejects))
    return DatasetManifest(covid + pneumonia, rejects)


# --------------------------------------------------------------------------- #
# Patient-wise split
# --------------------------------------------------------------------------- #

def _primary_class(labels: Counter) -> str:
    best = max(labels.values())
    return next(lbl for lbl in RAW_LABELS if labels.get(lbl, 0) == best)


def split_by_patient(manifest: DatasetManifest, test_fraction: float = 0.2,
                     val_count: int = 10, seed: int = 0, keep_labels=()) -> DatasetManifest:
    """Re-assign splits so that every patient lives in exactly one split.

    Patients are grouped by their majority label and visited class by class
    in a seeded order.  Test is filled greedily until the running image
    count reaches ``test_fraction`` of all images seen so far (the target is
    cumulative across classes, so per-class overshoots do not accumulate).
    Validation then takes patients until ``val_count`` images per class,
    always leaving at least one patient of each class for training.

    Patients whose majority label is in ``keep_labels`` keep the split most
    of their images already carry (ties resolved test, val, train) and are
    left out of the test-fraction accounting.
    """
    if not 0 < test_fraction < 1:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if val_count < 0:
        raise SplitError("val_count must be >= 0")

    images = defaultdict(list)
    for i, r in enumerate(manifest.records):
        images[r.patient_id].append(i)
    by_class = defaultdict(list)
    for pid, idx in images.items():
        by_class[_primary_class(Counter(manifest.records[i].label for i in idx))].append(pid)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    cum_images = test_images = 0
    keep_labels = set(keep_labels)
    for label in RAW_LABELS:
        patients = sorted(by_class.get(label, []))
        if not patients:
            continue
        if label in keep_labels:
            for pid in patients:
                votes = Counter(manifest.records[i].split for i in images[pid])
                assignment[pid] = max(("test", "val", "train"), key=lambda s: votes.get(s, 0))
            continue
        if len(patients) < 2:
            raise SplitError(f"class {label} has {len(patients)} patient(s); need >= 2 to populate train and test")
        order = [patients[j] for j in rng.permutation(len(patients))]
        cum_images += sum(len(images[p]) for p in order)
        target = math.floor(test_fraction * cum_images + 0.5)

        remaining = list(order)
        # keep one patient back for train
        while test_images < target and len(remaining) > 1:
            pid = remaining.pop(0)
            assignment[pid] = "test"
            test_images += len(images[pid])

        val_images = 0
        while val_images < val_count and len(remaining) > 1:
            pid = remaining.pop(0)
            assignment[pid] = "val"
            val_images += len(images[pid])

        for pid in remaining:
            assignment[pid] = "train"

    records = [replace(r, split=assignment[r.patient_id]) for r in manifest.records]
    return DatasetManifest(records, list(manifest.rejects))


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #

def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            w.writerow([r.image_path, r.patient_id, r.label, r.split])


def read_manifest(path) -> DatasetManifest:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise ManifestError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}")
            records = [ImageRecord(row["image_path"], row["patient_id"], row["label"], row["split"])
                       for row in reader]
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return DatasetManifest(records)


def write_rejects(rejects: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p, reason in rejects:
            fh.write(f"{p}\t{reason}\n")


def split_summary(manifest: DatasetManifest, by: str = "images") -> list[list]:
    """Rows of a split table shaped like the sample-wise split table:
    one row per split, one column per class, plus a total."""
    counts = manifest.class_counts if by == "images" else manifest.patient_counts()
    rows = [["split", *RAW_LABELS, "Total"]]
    for j, split in enumerate(SPLITS):
        vals = [counts[label][j] for label in RAW_LABELS]
        rows.append([split, *vals, sum(vals)])
    return rows


# --------------------------------------------------------------------------- #
# Preprocessing
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be within [0, 1]")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std must be three values with positive std")

    def to_dict(self) -> dict:
        return {"target_size": self.target_size, "mean": list(self.mean),
                "std": list(self.std), "hflip_prob": self.hflip_prob}

    @classmethod
    def from_dict(cls, d) -> "PreprocessSpec":
        return cls(int(d["target_size"]), tuple(d["mean"]), tuple(d["std"]), float(d["hflip_prob"]))


def load_and_preprocess(path, spec: PreprocessSpec, mode: str = "eval",
                        rng: np.random.Generator | None = None) -> torch.Tensor:
    """Decode, replicate grayscale to 3 channels, resize and normalize.

    Returns a float32 tensor of shape ``(3, S, S)``.  Only ``mode="train"``
    applies augmentation (horizontal flip drawn from ``rng``).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    try:
        with Image.open(path) as im:
            im = im.convert("L").resize((spec.target_size, spec.target_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    if mode == "train" and spec.hflip_prob > 0:
        rng = rng if rng is not None else np.random.default_rng()
        if rng.random() < spec.hflip_prob:
            arr = arr[:, ::-1]
    mean = np.asarray(spec.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(spec.std, dtype=np.float32)[:, None, None]
    out = (np.broadcast_to(arr, (3, *arr.shape)) - mean) / std
    return torch.from_numpy(np.ascontiguousarray(out, dtype=np.float32))


def denormalize(x: torch.Tensor, spec: PreprocessSpec) -> torch.Tensor:
    mean = torch.tensor(spec.mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(spec.std, dtype=x.dtype).view(3, 1, 1)
    return x * std + mean


class XrayDataset(Dataset):
    """Map-style dataset over manifest records.

    Indices are either plain ints (eval) or ``(index, aug_seed)`` pairs
    emitted by the training sampler, so augmentation stays reproducible
    regardless of worker count.
    """

    def __init__(self, records: Sequence[ImageRecord], class_cfg: ClassConfig,
                 spec: PreprocessSpec, mode: str = "eval"):
        self.records = list(records)
        self.class_cfg = class_cfg
        self.spec = spec
        self.mode = mode
        self.targets = [class_cfg.index(r.label) for r in self.records]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, item):
        if isinstance(item, tuple):
            idx, aug_seed = item
            rng = np.random.default_rng(aug_seed)
        else:
            idx, rng = item, None
        x = load_and_preprocess(self.records[idx].image_path, self.spec, self.mode, rng)
        return x, self.targets[idx]
