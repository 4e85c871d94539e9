"""Paired H&E / mIHC datasets on disk.

Layout::

    root/
      manifest.json            optional split manifest with patient ids
      train/hne/<name>.png     8-bit RGB H&E
      train/mihc/<name>.png    8-bit, channels (DAPI, CD3, panCK)
      val/...
      test/...

The manifest is ``{"train": [...], "val": [...], "test": [...],
"patients": {sample_id: patient_id}}`` where a sample id is the file stem.
"""
from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stainbridge.errors import DatasetValidationError
from stainbridge.imageio import atomic_write_text, image_size, read_rgb

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
# split proportions of the released HEMIT patches (3717 / 630 / 945)
HEMIT_SPLIT_COUNTS = (3717, 630, 945)


@dataclass
class PairedSample:
    sample_id: str
    split: str
    hne_path: Path
    mihc_path: Path
    patient_id: str | None = None

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        hne, mihc = read_rgb(self.hne_path), read_rgb(self.mihc_path)
        if hne.shape != mihc.shape:
            raise DatasetValidationError(
                f"{self.sample_id}: H&E {hne.shape} and mIHC {mihc.shape} sizes differ"
            )
        return hne, mihc


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    patients: dict[str, str] = field(default_factory=dict)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def split_of(self) -> dict[str, str]:
        return {s: name for name in SPLITS for s in getattr(self, name)}

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for name in SPLITS:
            for sid in getattr(self, name):
                if sid in seen:
                    raise DatasetValidationError(
                        f"sample {sid!r} appears in both {seen[sid]!r} and {name!r}"
                    )
                seen[sid] = name
        if not self.patients:
            return
        missing = [s for s in seen if s not in self.patients]
        if missing:
            raise DatasetValidationError(
                f"{len(missing)} samples lack a patient id, e.g. {missing[:3]}"
            )
        splits_per_patient: dict[str, set[str]] = defaultdict(set)
        for sid, split in seen.items():
            splits_per_patient[self.patients[sid]].add(split)
        leaked = {p: sorted(s) for p, s in splits_per_patient.items() if len(s) > 1}
        if leaked:
            detail = "; ".join(f"{p}: {', '.join(s)}" for p, s in sorted(leaked.items())[:5])
            raise DatasetValidationError(
                f"patient leakage across splits for {len(leaked)} patient(s): {detail}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {"train": self.train, "val": self.val, "test": self.test, "patients": self.patients},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(
            train=list(d.get("train", [])), val=list(d.get("val", [])),
            test=list(d.get("test", [])), patients=dict(d.get("patients", {})),
        )

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json())


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def load_dataset(root, check_sizes: bool = True) -> tuple[list[PairedSample], SplitManifest]:
    """Index and validate a dataset tree; images are not decoded.

    Raises :class:`DatasetValidationError` for missing split directories,
    unpaired files, pair size mismatches, samples shared between splits,
    patient leakage, or a manifest that disagrees with the directory contents.
    """
    root = Path(root)
    missing_dirs = [
        f"{split}/{kind}" for split in SPLITS for kind in ("hne", "mihc")
        if not (root / split / kind).is_dir()
    ]
    if missing_dirs:
        raise DatasetValidationError(f"{root}: missing split directories: {', '.join(missing_dirs)}")

    manifest_path = root / MANIFEST_NAME
    stored = SplitManifest.from_json(manifest_path.read_text()) if manifest_path.exists() else None
    found = SplitManifest(patients=dict(stored.patients) if stored else {})
    samples: list[PairedSample] = []
    for split in SPLITS:
        hne, mihc = _stems(root / split / "hne"), _stems(root / split / "mihc")
        orphans = sorted(set(hne) ^ set(mihc))
        if orphans:
            named = [
                f"{split}/{'hne' if o in hne else 'mihc'}/{o}.png (no {'mihc' if o in hne else 'hne'} partner)"
                for o in orphans[:10]
            ]
            raise DatasetValidationError(f"unpaired files: {'; '.join(named)}")
        for sid in sorted(hne):
            if check_sizes and image_size(hne[sid]) != image_size(mihc[sid]):
                raise DatasetValidationError(
                    f"{split}/{sid}: H&E {image_size(hne[sid])} vs mIHC {image_size(mihc[sid])}"
                )
            getattr(found, split).append(sid)
            samples.append(PairedSample(sid, split, hne[sid], mihc[sid], found.patients.get(sid)))

    found.validate()
    if stored is not None:
        for split in SPLITS:
            listed, present = set(getattr(stored, split)), set(getattr(found, split))
            if listed != present:
                extra, absent = sorted(present - listed), sorted(listed - present)
                raise DatasetValidationError(
                    f"manifest {split!r} disagrees with directory: "
                    f"unlisted {extra[:5]}, missing files {absent[:5]}"
                )
    return samples, found


def assign_splits(patients: dict[str, str], weights=HEMIT_SPLIT_COUNTS, seed: int = 0) -> SplitManifest:
    """Patient-disjoint split of ``{sample_id: patient_id}``.

    Patients are visited in a seeded random order; each goes, with all its
    samples, to the split furthest below its target share.
    """
    by_patient: dict[str, list[str]] = defaultdict(list)
    for sid, pid in sorted(patients.items()):
        by_patient[pid].append(sid)
    order = sorted(by_patient)
    random.Random(seed).shuffle(order)
    total = float(len(patients))
    targets = [w / sum(weights) * total for w in weights]
    manifest = SplitManifest(patients=dict(patients))
    for pid in order:
        sizes = [len(getattr(manifest, s)) for s in SPLITS]
        deficit = [t - n for t, n in zip(targets, sizes)]
        target = SPLITS[int(np.argmax(deficit))]
        getattr(manifest, target).extend(by_patient[pid])
    for s in SPLITS:
        getattr(manifest, s).sort()
    manifest.validate()
    return manifest
