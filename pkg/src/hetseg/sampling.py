"""Balanced patch mini-batches.

Every item draws a dataset uniformly, then a class uniformly among that
dataset's labels (background included), then a centre voxel uniformly among
all voxels of that class, and crops a patch around it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyClass, ValidationError
from .labelspace import LabelSpace, complement_set, patch_complement_set
from .manifest import LoadedDataset
from .volumes import extract_patch


@dataclass
class PatchBatch:
    intensities: np.ndarray  # (batch, channel, x, y, z) float32
    labels: np.ndarray  # (batch, x, y, z) uint8
    dataset_names: list[str]
    complement_sets: list[frozenset]
    lesion_sourced: np.ndarray  # (batch,) bool
    centers: np.ndarray  # (batch, 3) int
    classes: np.ndarray  # (batch,) drawn class per item

    def __len__(self):
        return len(self.dataset_names)

    def complement_masks(self, n_classes: int) -> np.ndarray:
        out = np.zeros((len(self), n_classes), dtype=bool)
        for b, comp in enumerate(self.complement_sets):
            out[b, sorted(comp)] = True
        return out


@dataclass
class _ClassIndex:
    volume: np.ndarray  # int32, which volume of the dataset
    flat: np.ndarray  # int64, raveled voxel index inside that volume

    def __len__(self):
        return len(self.flat)


class SamplerState:
    """Class-to-voxel indices per dataset plus the random stream.

    Reproducible only under serialised :func:`next_batch` calls.
    """

    def __init__(self, datasets, space, rng, channels, classes, index, images, complement_mode):
        self.datasets: list[LoadedDataset] = datasets
        self.space: LabelSpace = space
        self.rng: np.random.Generator = rng
        self.channels = channels
        self.classes: list[np.ndarray] = classes
        self.index: list[dict[int, _ClassIndex]] = index
        self._images = images
        self.complement_mode = complement_mode

    @property
    def dataset_names(self) -> list[str]:
        return [d.name for d in self.datasets]

    def draw(self):
        """One (dataset index, class id, volume index, centre) draw."""
        rng = self.rng
        d = int(rng.integers(len(self.datasets)))
        classes = self.classes[d]
        c = int(classes[rng.integers(len(classes))])
        idx = self.index[d][c]
        j = int(rng.integers(len(idx)))
        v = int(idx.volume[j])
        shape = self.datasets[d].masks[v].shape
        center = np.unravel_index(int(idx.flat[j]), shape)
        return d, c, v, tuple(int(x) for x in center)


def build_sampler(
    datasets: Sequence[LoadedDataset],
    space: LabelSpace,
    seed: int,
    channels: Sequence[str] | None = None,
    complement: str = "dataset",
) -> SamplerState:
    """Index class voxels of every dataset.

    ``channels`` selects modalities by name (default: the space's shared
    modalities). ``complement`` is ``"dataset"`` or ``"patch"``.
    """
    if not datasets:
        raise ValidationError("need at least one dataset")
    if complement not in ("dataset", "patch"):
        raise ValidationError(f"unknown complement mode {complement!r}")
    channels = list(channels) if channels is not None else list(space.shared_modalities)
    classes, index, images = [], [], []
    for ds in datasets:
        labelset = sorted(ds.spec.labelset)
        per_class: dict[int, tuple[list, list]] = {c: ([], []) for c in labelset}
        for v, mask in enumerate(ds.masks):
            flat = mask.data.ravel()
            order = np.argsort(flat, kind="stable")
            counts = np.bincount(flat, minlength=256)
            starts = np.concatenate([[0], np.cumsum(counts)])
            for c in labelset:
                sel = order[starts[c] : starts[c + 1]]
                if sel.size:
                    per_class[c][0].append(np.full(sel.size, v, dtype=np.int32))
                    per_class[c][1].append(sel.astype(np.int64))
        ds_index = {}
        for c in labelset:
            vols, flats = per_class[c]
            if not flats:
                name = next((l.name for l in space.labels if l.id == c), str(c))
                raise EmptyClass(f"dataset {ds.name!r} has no voxel of class {name!r} (id {c})")
            ds_index[c] = _ClassIndex(np.concatenate(vols), np.concatenate(flats))
        classes.append(np.array(labelset, dtype=np.int64))
        index.append(ds_index)
        images.append([np.ascontiguousarray(vol.channels(channels)) for vol in ds.volumes])
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return SamplerState(list(datasets), space, rng, channels, classes, index, images, complement)


def next_batch(state: SamplerState, batch_size: int, patch_size) -> PatchBatch:
    patch_size = tuple(int(s) for s in patch_size)
    n_ch = len(state.channels)
    x = np.empty((batch_size, n_ch, *patch_size), dtype=np.float32)
    y = np.empty((batch_size, *patch_size), dtype=np.uint8)
    names, comps = [], []
    lesion = np.zeros(batch_size, dtype=bool)
    centers = np.empty((batch_size, 3), dtype=np.int64)
    drawn = np.empty(batch_size, dtype=np.int64)
    full = state.space.ids
    for b in range(batch_size):
        d, c, v, center = state.draw()
        ds = state.datasets[d]
        img, lab = extract_patch(state._images[d][v], ds.masks[v].data, center, patch_size)
        x[b] = img
        y[b] = lab
        names.append(ds.name)
        centers[b] = center
        drawn[b] = c
        lesion_ids = ds.spec.lesion_ids
        lesion[b] = bool(lesion_ids)
        if not lesion_ids:
            comps.append(full)
        elif state.complement_mode == "dataset":
            comps.append(complement_set(state.space, ds.name))
        else:
            comps.append(patch_complement_set(state.space, np.unique(lab)))
    return PatchBatch(x, y, names, comps, lesion, centers, drawn)
