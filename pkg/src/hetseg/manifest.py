"""``dataset.json`` manifests and loading datasets into a label space.

Manifest layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "anatomy",
      "role": "anatomy" | "lesion" | "joint",
      "annotation": "anatomy_only" | "lesion_only" | "joint",
      "modalities": ["T1", "FLAIR"],
      "labels": [{"id": 1, "name": "CSF", "kind": "anatomy"}, ...],
      "entries": [{"images": ["sub-000_T1.nii", ...], "mask": "sub-000_mask.nii"}, ...],
      "subjects": [{"subject": "sub-000", "seed": 17}, ...],
      "params": {...}
    }

Paths are relative to the manifest's directory. Label ids are the ids used
inside the mask files; loading remaps them by name into a LabelSpace.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IoError, NotFound, ValidationError
from .labelspace import (
    BACKGROUND_ID,
    DatasetRole,
    DatasetSpec,
    LabelDef,
    LabelKind,
    LabelSpace,
    VolumeEntry,
)
from .volumes import SegmentationMask, Volume, read_nifti, read_volume, zscore_nonzero

MANIFEST_VERSION = 1


def write_manifest(path, spec: DatasetSpec, annotation: str, subjects=(), params=None) -> None:
    doc = {
        "schema_version": MANIFEST_VERSION,
        "name": spec.name,
        "role": spec.role.value,
        "annotation": annotation,
        "modalities": list(spec.modalities),
        "labels": [{"id": l.id, "name": l.name, "kind": l.kind.value} for l in spec.labels],
        "entries": [{"images": list(e.images), "mask": e.mask} for e in spec.volume_entries],
        "subjects": list(subjects),
    }
    if params is not None:
        doc["params"] = params
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> tuple[DatasetSpec, dict]:
    """Parse a manifest; entry paths come back absolute."""
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "dataset.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("schema_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest schema_version {doc.get('schema_version')!r}")
    root = os.path.dirname(os.path.abspath(path))
    labels = tuple(LabelDef(int(l["id"]), l["name"], l["kind"]) for l in doc["labels"])
    entries = tuple(
        VolumeEntry(tuple(os.path.join(root, p) for p in e["images"]), os.path.join(root, e["mask"]))
        for e in doc["entries"]
    )
    spec = DatasetSpec(doc["name"], labels, tuple(doc["modalities"]), doc["role"], entries)
    return spec, doc


@dataclass
class LoadedDataset:
    """Volumes and masks of one dataset, masks expressed in ``space`` ids."""

    spec: DatasetSpec
    volumes: list[Volume]
    masks: list[SegmentationMask]
    subjects: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.spec.name

    def __len__(self):
        return len(self.volumes)


def _lut(file_labels, space: LabelSpace) -> np.ndarray:
    lut = np.full(256, 255, dtype=np.uint8)
    lut[BACKGROUND_ID] = BACKGROUND_ID
    for lab in file_labels:
        try:
            lut[lab.id] = space.label_id(lab.name)
        except NotFound:
            raise ValidationError(
                f"manifest label {lab.name!r} is not part of label space {space.label_names}"
            ) from None
    return lut


def load_dataset(
    source,
    space: LabelSpace,
    dataset_name: str | None = None,
    normalize: bool = True,
) -> LoadedDataset:
    """Load a manifest (path) into ``space``.

    With ``dataset_name`` the data is bound to that training dataset of the
    space; without it the manifest is treated as an evaluation set and gets
    a joint-role spec over the matching space labels.
    """
    file_spec, doc = read_manifest(source)
    lut = _lut(file_spec.labels, space)
    if dataset_name is not None:
        target = space.dataset(dataset_name)
        missing = [m for m in target.modalities if m not in file_spec.modalities]
        if missing:
            raise ValidationError(f"{source}: dataset {dataset_name!r} needs modalities {missing}")
        allowed = target.labelset
    else:
        ids = sorted(int(lut[l.id]) for l in file_spec.labels)
        by_id = {l.id: l for l in space.labels}
        target = DatasetSpec(
            file_spec.name,
            tuple(by_id[i] for i in ids),
            file_spec.modalities,
            DatasetRole.JOINT,
            file_spec.volume_entries,
        )
        allowed = frozenset([BACKGROUND_ID, *ids])

    volumes, masks, subjects = [], [], []
    subject_names = [s.get("subject") for s in doc.get("subjects", [])]
    for i, entry in enumerate(file_spec.volume_entries):
        vol = read_volume(entry.images, file_spec.modalities)
        if normalize:
            vol = zscore_nonzero(vol)
        mask, _ = read_nifti(entry.mask, as_mask=True)
        if mask.shape != vol.shape:
            raise ValidationError(f"{entry.mask}: mask shape {mask.shape} != image shape {vol.shape}")
        data = lut[mask.data]
        bad = np.setdiff1d(np.unique(data), np.array(sorted(allowed), dtype=np.uint8))
        if bad.size:
            raise ValidationError(f"{entry.mask}: labels {bad.tolist()} outside dataset labelset")
        volumes.append(vol)
        masks.append(SegmentationMask(data, space.name, target.name))
        subjects.append(subject_names[i] if i < len(subject_names) and subject_names[i] else f"sub-{i:03d}")
    return LoadedDataset(target, volumes, masks, subjects)


def in_memory_dataset(spec: DatasetSpec, volumes, masks, subjects=None) -> LoadedDataset:
    """Wrap arrays already expressed in label-space ids."""
    subjects = list(subjects) if subjects is not None else [f"sub-{i:03d}" for i in range(len(volumes))]
    return LoadedDataset(spec, list(volumes), list(masks), subjects)
