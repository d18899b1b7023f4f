"""Dataset manifests: labelled records, a stratified 75/25 split, batch loading."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import bilinear_resize, read_png

KINDS = ("none", "copy_move", "inpaint")
TRAIN_FRACTION = 0.75


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image_path: str
    label: int  # 0 authentic, 1 forged
    forgery_kind: str = "none"
    mask_path: str | None = None
    split: str = "train"

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise ManifestError(f"{self.image_path}: label must be 0 or 1")
        if self.forgery_kind not in KINDS:
            raise ManifestError(f"{self.image_path}: unknown forgery_kind {self.forgery_kind!r}")
        forged = self.label == 1
        if forged != (self.forgery_kind != "none") or forged != (self.mask_path is not None):
            raise ManifestError(
                f"{self.image_path}: label, forgery_kind and mask_path disagree "
                f"(label={self.label}, kind={self.forgery_kind}, mask={self.mask_path})")
        if self.split not in ("train", "val"):
            raise ManifestError(f"{self.image_path}: split must be 'train' or 'val'")

    def to_json(self) -> str:
        d = {"image_path": self.image_path, "label": self.label,
             "forgery_kind": self.forgery_kind, "mask_path": self.mask_path,
             "split": self.split}
        return json.dumps(d, separators=(",", ":"))


@dataclass
class DatasetManifest:
    records: list[Record]
    seed: int | None = None
    # directory relative paths are resolved against
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def split_ids(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def save(self, path) -> None:
        """Write JSON lines with paths relative to the manifest's directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        lines = []
        for r in self.records:
            img = _relative(self.resolve(r.image_path), base)
            mask = None if r.mask_path is None else _relative(self.resolve(r.mask_path), base)
            lines.append(replace(r, image_path=img, mask_path=mask).to_json())
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    rec = Record(d["image_path"], int(d["label"]), d["forgery_kind"],
                                 d.get("mask_path"), d["split"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ManifestError(f"{path}:{lineno}: bad record ({exc})") from None
                rec.validate()
                records.append(rec)
        return cls(records, None, path.parent)

    def with_absolute_paths(self) -> "DatasetManifest":
        recs = [replace(r, image_path=str(self.resolve(r.image_path).resolve()),
                        mask_path=None if r.mask_path is None
                        else str(self.resolve(r.mask_path).resolve()))
                for r in self.records]
        return DatasetManifest(recs, self.seed, Path("/"))


def _relative(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p.resolve(), base)).as_posix()


def stratified_split(records: list[Record], seed: int) -> list[Record]:
    """Assign train/val per label: 75% of each label's records go to train."""
    rng = np.random.default_rng(seed)
    split = ["val"] * len(records)
    for label in (0, 1):
        idx = [i for i, r in enumerate(records) if r.label == label]
        order = rng.permutation(len(idx))
        n_train = int(round(TRAIN_FRACTION * len(idx)))
        for k in order[:n_train]:
            split[idx[k]] = "train"
    return [replace(r, split=s) for r, s in zip(records, split)]


def manifest_from_records(records: list[Record], split_seed: int, root=Path()) -> DatasetManifest:
    seen = set()
    for r in records:
        r.validate()
        if r.image_path in seen:
            raise ManifestError(f"duplicate image path {r.image_path}")
        seen.add(r.image_path)
    return DatasetManifest(stratified_split(list(records), split_seed), split_seed, Path(root))


def _pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def build_manifest(authentic_dir, forged_dir, split_seed: int = 0,
                   forged_records: list[dict] | None = None) -> DatasetManifest:
    """One record per image; forged entries come from ``records.jsonl`` in
    ``forged_dir`` (or ``forged_records``), each naming its mask."""
    authentic_dir, forged_dir = Path(authentic_dir), Path(forged_dir)
    authentic = _pngs(authentic_dir) if authentic_dir.is_dir() else []
    if forged_records is None:
        index = forged_dir / "records.jsonl"
        if not index.is_file():
            raise ManifestError(f"{index} not found")
        forged_records = [json.loads(line) for line in index.read_text(encoding="utf-8").splitlines()
                          if line.strip()]
    if not authentic or not forged_records:
        raise ManifestError("both the authentic and forged sets must be nonempty")
    records = [Record(str(p.resolve()), 0) for p in authentic]
    for d in forged_records:
        img = forged_dir / d["image_path"]
        if not d.get("mask_path"):
            raise ManifestError(f"forged record {img} has no mask")
        mask = forged_dir / d["mask_path"]
        if not mask.is_file():
            raise ManifestError(f"mask {mask} for forged record {img} is missing")
        records.append(Record(str(img.resolve()), 1, d["kind"], str(mask.resolve())))
    return manifest_from_records(records, split_seed, Path("/"))


def combine_manifests(manifests: list[DatasetManifest], split_seed: int) -> DatasetManifest:
    """Concatenate manifests and draw a fresh joint split."""
    recs = [r for m in manifests for r in m.with_absolute_paths().records]
    return manifest_from_records(recs, split_seed, Path("/"))


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    labels: np.ndarray
    record_ids: list[int]


def load_image_tensor(path, target_size: int) -> np.ndarray:
    img = read_png(path).astype(np.float64)
    img = bilinear_resize(img, target_size, target_size)
    return (np.clip(img, 0, 255) / 255.0).transpose(2, 0, 1).astype(np.float32)


def load_batch(manifest: DatasetManifest, record_ids, target_size: int) -> Batch:
    ids = list(record_ids)
    if not ids:
        raise ValueError("empty batch")
    for i in ids:
        if not 0 <= i < len(manifest.records):
            raise IndexError(f"record id {i} out of range")
    images = np.stack([load_image_tensor(manifest.resolve(manifest.records[i].image_path),
                                         target_size) for i in ids])
    labels = np.array([manifest.records[i].label for i in ids], dtype=np.float32)
    return Batch(images, labels, ids)


def epoch_iterator(manifest: DatasetManifest, split: str, batch_size: int,
                   shuffle_seed: int, epoch: int = 0) -> list[list[int]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = manifest.split_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(ids))
    ids = [ids[k] for k in order]
    return [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
