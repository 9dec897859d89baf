"""Dataset construction: paired crops, quadrant test crops, class balancing and manifests.

Source directory layout::

    <dir>/<patient_id>_fundus.png   RGB fundus photograph
    <dir>/<patient_id>_fa.png       grayscale angiogram, registered to the fundus
    <dir>/labels.csv                header "patient_id,label", label in {Normal, Abnormal}

A manifest is a JSON-lines file with one record per crop giving its
provenance (patient, split, crop origin, crop size, augmentation, seed). Crops
are regenerated from the sources on demand, so the manifest alone pins down
the dataset.
"""

from __future__ import annotations

import csv
import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

CLASSES = ("Abnormal", "Normal")
AUGMENTATIONS = ("rot90", "rot180", "rot270", "flip", "flip_rot90", "flip_rot180", "flip_rot270")


class DataError(ValueError):
    pass


@dataclass
class FundusAngioPair:
    fundus: np.ndarray  # (H, W, 3) in [-1, 1]
    angio: np.ndarray  # (H, W, 1) in [-1, 1]
    label: str
    patient_id: str = ""
    crop_origin: tuple[int, int] = (0, 0)
    augmentation: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fundus.shape[:2] != self.angio.shape[:2]:
            raise DataError(f"fundus {self.fundus.shape} and angiogram {self.angio.shape} are not registered")
        if self.label not in CLASSES:
            raise DataError(f"label must be one of {CLASSES}, got {self.label!r}")

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)


# --- image I/O ------------------------------------------------------------------


def to_unit(arr8: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float [-1, 1]."""
    return np.asarray(arr8, dtype=np.float64) / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_png(path: str | Path, channels: int) -> np.ndarray:
    """Read an 8-bit image as ``(H, W, channels)`` floats in [-1, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return to_unit(arr)


def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


# --- crops -----------------------------------------------------------------------


def _patient_rng(seed: int, patient_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(patient_id.encode())])


def crop_origins(shape: tuple[int, int], crop: int, count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    h, w = shape
    if crop > h or crop > w:
        raise DataError(f"crop {crop} larger than source {h}x{w}")
    rows = rng.integers(0, h - crop + 1, size=count)
    cols = rng.integers(0, w - crop + 1, size=count)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def _cut(img: np.ndarray, origin: tuple[int, int], crop: int) -> np.ndarray:
    r, c = origin
    return img[r : r + crop, c : c + crop].copy()


def extract_crops(
    fundus: np.ndarray,
    angio: np.ndarray,
    label: str,
    patient_id: str = "",
    crop: int = 512,
    count: int = 50,
    seed: int = 0,
) -> list[FundusAngioPair]:
    """``count`` crops at seeded uniform origins, identical for fundus and angiogram."""
    if fundus.shape[:2] != angio.shape[:2]:
        raise DataError(f"fundus {fundus.shape} and angiogram {angio.shape} differ in size")
    origins = crop_origins(fundus.shape[:2], crop, count, _patient_rng(seed, patient_id))
    return [
        FundusAngioPair(_cut(fundus, o, crop), _cut(angio, o, crop), label, patient_id, o, meta={"seed": seed})
        for o in origins
    ]


def quadrant_origins(shape: tuple[int, int], crop: int) -> list[tuple[int, int]]:
    h, w = shape
    if crop > h or crop > w:
        raise DataError(f"source {h}x{w} is smaller than the {crop} quadrant crop")
    return [(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)]


def quadrant_crops(
    fundus: np.ndarray, angio: np.ndarray, label: str, patient_id: str = "", crop: int = 512
) -> list[FundusAngioPair]:
    """The four corner-anchored (overlapping) crops."""
    return [
        FundusAngioPair(_cut(fundus, o, crop), _cut(angio, o, crop), label, patient_id, o)
        for o in quadrant_origins(fundus.shape[:2], crop)
    ]


# --- augmentation and balancing ---------------------------------------------------


def augment(img: np.ndarray, name: str) -> np.ndarray:
    """Dihedral transform of the two spatial axes."""
    if name == "none":
        return img
    if name not in AUGMENTATIONS:
        raise DataError(f"unknown augmentation {name!r}")
    out = img
    if name.startswith("flip"):
        out = out[:, ::-1]
    if "rot" in name:
        out = np.rot90(out, int(name.split("rot")[1]) // 90, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment_pair(pair: FundusAngioPair, name: str) -> FundusAngioPair:
    return FundusAngioPair(
        augment(pair.fundus, name),
        augment(pair.angio, name),
        pair.label,
        pair.patient_id,
        pair.crop_origin,
        name,
        dict(pair.meta),
    )


def balance_plan(labels: Sequence[str], target_per_class: int | None = None, seed: int = 0) -> list[tuple[int, str]]:
    """Extra samples needed to balance: ``(source index, augmentation)`` per new item."""
    counts = Counter(labels)
    target = target_per_class if target_per_class is not None else max(counts.values())
    if target < max(counts.values()):
        raise DataError(f"target {target} is below the largest class count {max(counts.values())}")
    rng = np.random.default_rng(seed)
    plan = []
    for cls in CLASSES:
        members = [i for i, lab in enumerate(labels) if lab == cls]
        need = target - len(members)
        if need <= 0 or not members:
            continue
        order = rng.permutation(len(members))
        for k in range(need):
            src = members[int(order[k % len(members)])]
            plan.append((src, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]))
    return plan


def balance_classes(pairs: list[FundusAngioPair], target_per_class: int | None = None, seed: int = 0) -> list[FundusAngioPair]:
    """Top up minority classes with flipped/rotated copies until every class has ``target`` pairs."""
    plan = balance_plan([p.label for p in pairs], target_per_class, seed)
    return list(pairs) + [augment_pair(pairs[i], name) for i, name in plan]


# --- source directories and manifests ---------------------------------------------


def read_labels(path: str | Path) -> dict[str, str]:
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid, lab = row["patient_id"].strip(), row["label"].strip()
            if lab not in CLASSES:
                raise DataError(f"{path}: label {lab!r} for {pid} is not one of {CLASSES}")
            labels[pid] = lab
    return labels


def list_patients(data_dir: str | Path) -> dict[str, str]:
    """Patients with both images present, mapped to their label."""
    data_dir = Path(data_dir)
    labels_path = data_dir / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"missing {labels_path}")
    labels = read_labels(labels_path)
    problems = []
    for pid in labels:
        for suffix in ("fundus", "fa"):
            if not (data_dir / f"{pid}_{suffix}.png").exists():
                problems.append(f"{pid}_{suffix}.png")
    if problems:
        raise DataError(f"missing images in {data_dir}: {', '.join(problems)}")
    return dict(sorted(labels.items()))


class SourceCache:
    """Loads and memoizes full-size source pairs."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, pid: str) -> tuple[np.ndarray, np.ndarray]:
        if pid not in self._cache:
            fundus = read_png(self.data_dir / f"{pid}_fundus.png", 3)
            angio = read_png(self.data_dir / f"{pid}_fa.png", 1)
            if fundus.shape[:2] != angio.shape[:2]:
                raise DataError(f"{pid}: fundus {fundus.shape[:2]} and angiogram {angio.shape[:2]} differ in size")
            self._cache[pid] = (fundus, angio)
        return self._cache[pid]


def split_patients(patients: Sequence[str], test_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Patient-level split; no patient appears on both sides."""
    order = list(np.random.default_rng([seed, 7]).permutation(sorted(patients)))
    n_test = int(round(test_fraction * len(order)))
    if len(order) > 1:
        n_test = min(max(n_test, 1 if test_fraction > 0 else 0), len(order) - 1)
    return sorted(order[n_test:]), sorted(order[:n_test])


def build_manifest(
    data_dir: str | Path,
    crop: int,
    crops_per_image: int = 50,
    test_fraction: float = 0.45,
    balance: bool = True,
    seed: int = 0,
) -> list[dict]:
    labels = list_patients(data_dir)
    sources = SourceCache(data_dir)
    train_ids, test_ids = split_patients(list(labels), test_fraction, seed)
    records: list[dict] = []
    for pid in train_ids:
        shape = sources(pid)[0].shape[:2]
        for origin in crop_origins(shape, crop, crops_per_image, _patient_rng(seed, pid)):
            records.append(_record(pid, labels[pid], "train", origin, crop, "none", seed))
    if balance and records:
        plan = balance_plan([r["label"] for r in records], None, seed)
        records += [dict(records[i], augmentation=name) for i, name in plan]
    for pid in test_ids:
        shape = sources(pid)[0].shape[:2]
        for origin in quadrant_origins(shape, crop):
            records.append(_record(pid, labels[pid], "test", origin, crop, "none", seed))
    return records


def _record(pid, label, split, origin, crop, augmentation, seed) -> dict:
    return {
        "patient_id": pid,
        "label": label,
        "split": split,
        "origin": [int(origin[0]), int(origin[1])],
        "crop": int(crop),
        "augmentation": augmentation,
        "seed": int(seed),
    }


def write_manifest(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            missing = {"patient_id", "label", "split", "origin", "crop", "augmentation"} - set(rec)
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            records.append(rec)
    return records


class PairDataset:
    """Indexable collection of pairs, materialized lazily from manifest records or held in memory."""

    def __init__(self, pairs: Sequence[FundusAngioPair] | None = None, records: Sequence[dict] | None = None,
                 data_dir: str | Path | None = None):
        self._pairs = list(pairs) if pairs is not None else None
        self.records = list(records) if records is not None else None
        self._sources = SourceCache(data_dir) if data_dir is not None else None
        if self._pairs is None and (self.records is None or self._sources is None):
            raise ValueError("need either pairs or records plus a data directory")

    @classmethod
    def from_manifest(cls, manifest: str | Path, data_dir: str | Path, split: str = "train") -> "PairDataset":
        records = [r for r in read_manifest(manifest) if r["split"] == split]
        return cls(records=records, data_dir=data_dir)

    def __len__(self) -> int:
        return len(self._pairs) if self._pairs is not None else len(self.records)

    def __getitem__(self, i: int) -> FundusAngioPair:
        if self._pairs is not None:
            return self._pairs[i]
        r = self.records[i]
        fundus, angio = self._sources(r["patient_id"])
        origin = tuple(r["origin"])
        pair = FundusAngioPair(
            _cut(fundus, origin, r["crop"]), _cut(angio, origin, r["crop"]), r["label"], r["patient_id"], origin
        )
        return augment_pair(pair, r["augmentation"]) if r["augmentation"] != "none" else pair

    def labels(self) -> list[str]:
        if self._pairs is not None:
            return [p.label for p in self._pairs]
        return [r["label"] for r in self.records]

    def batch(self, indices: Sequence[int], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        items = [self[int(i)] for i in indices]
        fundus = np.stack([p.fundus for p in items]).astype(dtype)
        angio = np.stack([p.angio for p in items]).astype(dtype)
        labels = np.array([p.label_index for p in items])
        return fundus, angio, labels
