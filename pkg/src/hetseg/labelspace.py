"""Datasets, labelsets and the joint label space.

Each dataset annotates a subset of the joint labels (plus background, which
every dataset shares). Lesion datasets mark every non-lesion voxel as
background, which is what the adaptive loss has to undo: for those datasets
the background label really means "anything that is not one of my lesions".
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import LabelCollision, LabelSpaceError, NoSharedModalities, NotFound

BACKGROUND_ID = 0
BACKGROUND_NAME = "background"


class LabelKind(str, enum.Enum):
    BACKGROUND = "background"
    ANATOMY = "anatomy"
    LESION = "lesion"


class DatasetRole(str, enum.Enum):
    ANATOMY = "anatomy"
    LESION = "lesion"
    # evaluation sets carrying both kinds; never part of a training LabelSpace
    JOINT = "joint"


@dataclass(frozen=True)
class LabelDef:
    id: int
    name: str
    kind: LabelKind

    def __post_init__(self):
        object.__setattr__(self, "kind", LabelKind(self.kind))
        if self.id < 0:
            raise LabelSpaceError(f"label id must be non-negative, got {self.id}")


@dataclass(frozen=True)
class VolumeEntry:
    """Image files (one per modality, same order as the dataset's
    modalities) and the mask file of one subject."""

    images: tuple[str, ...]
    mask: str


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    labels: tuple[LabelDef, ...]
    modalities: tuple[str, ...]
    role: DatasetRole
    volume_entries: tuple[VolumeEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "role", DatasetRole(self.role))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "volume_entries", tuple(self.volume_entries))
        for lab in self.labels:
            if lab.id == BACKGROUND_ID:
                raise LabelSpaceError(
                    f"dataset {self.name!r}: background is implicit, do not declare id 0"
                )
            if self.role is not DatasetRole.JOINT and lab.kind.value != self.role.value:
                raise LabelSpaceError(
                    f"dataset {self.name!r} has role {self.role.value} but label "
                    f"{lab.name!r} is {lab.kind.value}"
                )
        ids = [lab.id for lab in self.labels]
        if len(set(ids)) != len(ids):
            raise LabelCollision(f"dataset {self.name!r} declares a label id twice")
        if not self.modalities:
            raise LabelSpaceError(f"dataset {self.name!r} lists no modalities")

    @property
    def labelset(self) -> frozenset[int]:
        return frozenset([BACKGROUND_ID, *(lab.id for lab in self.labels)])

    @property
    def lesion_ids(self) -> frozenset[int]:
        return frozenset(lab.id for lab in self.labels if lab.kind is LabelKind.LESION)


@dataclass(frozen=True)
class LabelSpace:
    labels: tuple[LabelDef, ...]
    datasets: tuple[DatasetSpec, ...]
    shared_modalities: tuple[str, ...]
    name: str = "joint"
    _by_name: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {d.name: d for d in self.datasets})

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(lab.id for lab in self.labels)

    @property
    def label_names(self) -> list[str]:
        return [lab.name for lab in self.labels]

    @property
    def lesion_ids(self) -> frozenset[int]:
        return frozenset(lab.id for lab in self.labels if lab.kind is LabelKind.LESION)

    @property
    def anatomy_ids(self) -> frozenset[int]:
        return frozenset(lab.id for lab in self.labels if lab.kind is LabelKind.ANATOMY)

    def dataset(self, name: str) -> DatasetSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise NotFound(f"unknown dataset {name!r}") from None

    def label_id(self, name: str) -> int:
        for lab in self.labels:
            if lab.name == name:
                return lab.id
        raise NotFound(f"unknown label {name!r}")


def declare_datasets(declarations: Iterable[dict]) -> list[DatasetSpec]:
    """Build DatasetSpecs from name-based declarations, assigning ids.

    Each declaration is a mapping with ``name``, ``role``, ``labels`` (list of
    label names), ``modalities`` and optionally ``volume_entries``. Ids are
    handed out as background = 0, then labels in dataset order, then in
    declaration order inside a dataset.
    """
    specs = []
    next_id = 1
    for decl in declarations:
        role = DatasetRole(decl["role"])
        labels = []
        for label_name in decl["labels"]:
            labels.append(LabelDef(next_id, label_name, LabelKind(role.value)))
            next_id += 1
        entries = tuple(
            e if isinstance(e, VolumeEntry) else VolumeEntry(tuple(e["images"]), e["mask"])
            for e in decl.get("volume_entries", ())
        )
        specs.append(
            DatasetSpec(decl["name"], tuple(labels), tuple(decl["modalities"]), role, entries)
        )
    return specs


def build_label_space(datasets: Sequence[DatasetSpec], name: str = "joint") -> LabelSpace:
    if not datasets:
        raise LabelSpaceError("at least one dataset is required")
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise LabelSpaceError(f"duplicate dataset names in {names}")

    for ds in datasets:
        if ds.role is DatasetRole.JOINT:
            raise LabelSpaceError(f"dataset {ds.name!r}: joint-annotated sets cannot be training datasets")

    owner: dict[int, str] = {}
    by_id: dict[int, LabelDef] = {}
    seen_names: dict[str, int] = {BACKGROUND_NAME: BACKGROUND_ID}
    for ds in datasets:
        for lab in ds.labels:
            if lab.id in owner:
                raise LabelCollision(
                    f"label id {lab.id} used by both {owner[lab.id]!r} and {ds.name!r}"
                )
            if lab.name in seen_names:
                raise LabelCollision(f"label name {lab.name!r} declared twice")
            owner[lab.id] = ds.name
            by_id[lab.id] = lab
            seen_names[lab.name] = lab.id

    n_classes = 1 + len(by_id)
    if sorted(by_id) != list(range(1, n_classes)):
        raise LabelSpaceError(f"label ids must be consecutive from 1, got {sorted(by_id)}")
    labels = (LabelDef(BACKGROUND_ID, BACKGROUND_NAME, LabelKind.BACKGROUND),) + tuple(
        by_id[i] for i in range(1, n_classes)
    )

    shared = [m for m in datasets[0].modalities if all(m in d.modalities for d in datasets[1:])]
    if not shared:
        raise NoSharedModalities(f"datasets {names} have no modality in common")
    return LabelSpace(labels, tuple(datasets), tuple(shared), name)


def complement_set(space: LabelSpace, dataset_name: str) -> frozenset[int]:
    """Labels whose probabilities are pooled on a dataset's background voxels.

    This is every joint label that is not one of the dataset's lesions, so it
    always holds background and all anatomy labels. For datasets without
    lesions it is the whole label space.
    """
    ds = space.dataset(dataset_name)
    return space.ids - ds.lesion_ids


def patch_complement_set(space: LabelSpace, present: Iterable[int]) -> frozenset[int]:
    """Literal per-patch reading: joint labels absent from the patch, plus
    background. Only used when ``complement="patch"`` is configured."""
    return (space.ids - frozenset(int(p) for p in present)) | {BACKGROUND_ID}


def channel_plan(space: LabelSpace, mode: str, dataset_name: str | None = None) -> list[str]:
    if mode == "single_model":
        return list(space.shared_modalities)
    if mode == "per_dataset":
        if dataset_name is None:
            raise NotFound("per_dataset channel plan needs a dataset name")
        return list(space.dataset(dataset_name).modalities)
    raise LabelSpaceError(f"unknown channel plan mode {mode!r}")
