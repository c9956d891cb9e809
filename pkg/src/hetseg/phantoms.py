"""Synthetic brain-like phantoms.

A phantom is a smoothly deformed ellipsoid made of concentric tissue shells
(outermost first, e.g. CSF, GM, WM), with a few lesion blobs placed inside
the two innermost shells. Every random draw comes from numpy's Philox
counter-based generator seeded with ``PhantomParams.seed``, so a given seed
gives the same phantom on every platform and numpy version that ships
Philox.

Native label ids: 0 background, ``1..n`` tissue shells from the outside in,
then the lesion classes.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import GeometryError, IoError, ValidationError
from .labelspace import DatasetSpec, LabelKind, LabelSpace, VolumeEntry, declare_datasets
from .manifest import write_manifest
from .volumes import SegmentationMask, Volume, write_nifti

# mean intensity per (modality, structure); tissue rows run outermost to innermost
_CONTRAST = {
    "T1": {"tissue": (0.25, 0.55, 0.80), "lesion": (0.72, 0.60)},
    "FLAIR": {"tissue": (0.12, 0.55, 0.45), "lesion": (0.95, 0.80)},
    "IR": {"tissue": (0.10, 0.40, 0.90), "lesion": (0.55, 0.50)},
    "T2": {"tissue": (0.95, 0.60, 0.45), "lesion": (0.85, 0.90)},
    "T1g": {"tissue": (0.25, 0.55, 0.80), "lesion": (0.72, 1.00)},
}


def default_intensity_means(modalities, n_shells, n_lesion_classes):
    """Per-modality mean for every native label (background first)."""
    means = {}
    for mod in modalities:
        table = _CONTRAST.get(mod)
        if table is None:
            raise ValidationError(
                f"no default contrast for modality {mod!r}; pass intensity_means explicitly"
            )
        tissue = np.interp(
            np.linspace(0, 2, n_shells) if n_shells > 1 else [2.0], [0, 1, 2], table["tissue"]
        )
        lesion = [table["lesion"][min(k, len(table["lesion"]) - 1)] for k in range(n_lesion_classes)]
        means[mod] = (0.0, *(round(float(t), 6) for t in tissue), *lesion)
    return means


@dataclass(frozen=True)
class PhantomParams:
    grid_size: tuple[int, int, int] = (64, 64, 64)
    n_tissue_shells: int = 3
    tissue_names: tuple[str, ...] = ("CSF", "GM", "WM")
    lesion_names: tuple[str, ...] = ("WMH",)
    n_lesions: tuple[int, int] = (2, 6)
    lesion_radius: tuple[float, float] = (2.0, 4.5)
    modalities: tuple[str, ...] = ("T1", "FLAIR")
    intensity_means: dict | None = None
    intensity_noise_sd: float = 0.05
    smoothing_sigma: float = 0.6
    deformation_amplitude: float = 0.08
    brain_extent: float = 0.85
    seed: int = 0

    def __post_init__(self):
        for name in ("grid_size", "tissue_names", "lesion_names", "n_lesions", "lesion_radius", "modalities"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_tissue_shells < 1:
            raise ValidationError("need at least one tissue shell")
        if len(self.tissue_names) != self.n_tissue_shells:
            raise ValidationError(
                f"{self.n_tissue_shells} shells but tissue names {self.tissue_names}"
            )
        if not self.lesion_names:
            raise ValidationError("need at least one lesion class name")
        if len(self.grid_size) != 3 or min(self.grid_size) < 8:
            raise ValidationError(f"grid too small: {self.grid_size}")
        lo, hi = self.n_lesions
        if lo < 0 or hi < lo:
            raise ValidationError(f"bad lesion count range {self.n_lesions}")
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo or rhi >= min(self.grid_size) / 2:
            raise ValidationError(f"bad lesion radius range {self.lesion_radius}")
        if self.intensity_noise_sd < 0 or self.smoothing_sigma < 0:
            raise ValidationError("noise and smoothing must be non-negative")
        if not 0 < self.brain_extent <= 1:
            raise ValidationError("brain_extent must be in (0, 1]")
        if not 0 <= self.deformation_amplitude < 0.3:
            raise ValidationError("deformation_amplitude must be in [0, 0.3)")
        if self.intensity_means is None:
            object.__setattr__(
                self,
                "intensity_means",
                default_intensity_means(self.modalities, self.n_tissue_shells, len(self.lesion_names)),
            )
        n_labels = 1 + self.n_tissue_shells + len(self.lesion_names)
        for mod in self.modalities:
            row = self.intensity_means.get(mod)
            if row is None or len(row) != n_labels:
                raise ValidationError(f"intensity_means[{mod!r}] needs {n_labels} values")

    @property
    def n_labels(self) -> int:
        return 1 + self.n_tissue_shells + len(self.lesion_names)

    def shell_boundaries(self) -> np.ndarray:
        """Outer normalised radius of each shell, outermost first."""
        n = self.n_tissue_shells
        if n == 1:
            return np.array([1.0])
        return 1.0 - 0.4 * np.arange(n) / (n - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["intensity_means"] = {k: list(v) for k, v in self.intensity_means.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PhantomParams":
        d = dict(d)
        if d.get("intensity_means") is not None:
            d["intensity_means"] = {k: tuple(v) for k, v in d["intensity_means"].items()}
        return cls(**d)


def phantom_datasets(params: PhantomParams, anatomy_modalities=None, lesion_modalities=None):
    """Anatomy and lesion DatasetSpecs whose ids match the native phantom ids."""
    return declare_datasets(
        [
            {
                "name": "anatomy",
                "role": "anatomy",
                "labels": params.tissue_names,
                "modalities": anatomy_modalities or params.modalities,
            },
            {
                "name": "lesion",
                "role": "lesion",
                "labels": params.lesion_names,
                "modalities": lesion_modalities or params.modalities,
            },
        ]
    )


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _deformed_radius(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    shape = np.array(params.grid_size, dtype=np.float64)
    center = shape / 2 + rng.uniform(-0.03, 0.03, 3) * shape
    semi = params.brain_extent * shape / 2 * rng.uniform(0.9, 1.0, 3)
    axes = [(np.arange(n, dtype=np.float64) + 0.5 - c) / a for n, c, a in zip(params.grid_size, center, semi)]
    u = np.meshgrid(*axes, indexing="ij")
    # two low-frequency sinusoidal modes per axis
    freq = rng.uniform(0.5, 1.5, (3, 2, 3))
    phase = rng.uniform(0, 2 * np.pi, (3, 2))
    amp = params.deformation_amplitude
    r2 = np.zeros(params.grid_size)
    for ax in range(3):
        disp = np.zeros(params.grid_size)
        for mode in range(2):
            arg = sum(freq[ax, mode, k] * u[k] for k in range(3))
            disp += np.sin(np.pi * arg + phase[ax, mode])
        r2 += (u[ax] + 0.5 * amp * disp) ** 2
    return np.sqrt(r2), semi


def _stamp_lesion(labels, center, radii, native_ids, margin=1.0):
    """Nested ellipsoids: the first lesion class is the outer blob, later
    classes form progressively smaller cores.

    Returns the bounding-box slices and the blob grown by ``margin`` voxels
    (used to keep lesions off the shell boundary)."""
    reach = radii + margin
    lo = np.maximum(np.floor(center - reach).astype(int), 0)
    hi = np.minimum(np.ceil(center + reach).astype(int) + 1, labels.shape)
    sub = tuple(slice(a, b) for a, b in zip(lo, hi))
    grids = np.meshgrid(*(np.arange(a, b) + 0.0 for a, b in zip(lo, hi)), indexing="ij")
    rr = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))
    grown = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, reach))) <= 1.0
    region = labels[sub]
    n = len(native_ids)
    for k, lab in enumerate(native_ids):
        region[rr <= 1.0 - k / (n + 1)] = lab
    return sub, grown


def generate_phantom(params: PhantomParams) -> tuple[Volume, SegmentationMask]:
    rng = _rng(params.seed)
    radius, semi = _deformed_radius(params, rng)

    n = params.n_tissue_shells
    bounds = params.shell_boundaries()
    labels = np.zeros(params.grid_size, dtype=np.uint8)
    for k, outer in enumerate(bounds):
        labels[radius < outer] = k + 1

    inner_outer = bounds[max(n - 2, 0)]
    inner_ids = np.arange(max(n - 1, 1), n + 1)
    # lesions must fit in the innermost two shells even where the shape is squeezed
    room = inner_outer * semi.min() * (1 - params.deformation_amplitude)
    rlo, rhi = params.lesion_radius
    if rhi * 1.2 >= room:
        raise GeometryError(
            f"lesion radius up to {rhi} voxels does not fit inside the inner shells "
            f"(about {room:.1f} voxels across)"
        )

    tissue = labels.copy()
    allowed = np.isin(tissue, inner_ids)
    candidates = np.argwhere(allowed)
    lesion_native = list(range(n + 1, params.n_labels))
    n_lesions = int(rng.integers(params.n_lesions[0], params.n_lesions[1] + 1))
    for _ in range(n_lesions):
        r = rng.uniform(rlo, rhi)
        radii = r * rng.uniform(0.8, 1.2, 3)
        for _attempt in range(200):
            center = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, 3)
            trial = labels.copy()
            sub, grown = _stamp_lesion(trial, center, radii, lesion_native)
            stamped = trial[sub] != labels[sub]
            if stamped.any() and allowed[sub][grown].all():
                labels = trial
                break
        else:
            raise GeometryError(f"could not place a lesion of radius {r:.2f} after 200 attempts")

    n_mod = len(params.modalities)
    gain = 1.0 + rng.normal(0.0, 0.03, n_mod)
    noise = rng.standard_normal((n_mod, *params.grid_size))
    brain = labels > 0
    data = np.zeros((n_mod, *params.grid_size), dtype=np.float64)
    for ch, mod in enumerate(params.modalities):
        lut = np.asarray(params.intensity_means[mod], dtype=np.float64)
        img = lut[labels] * gain[ch] + params.intensity_noise_sd * noise[ch] * brain
        if params.smoothing_sigma > 0:
            img = ndimage.gaussian_filter(img, params.smoothing_sigma, mode="constant")
        data[ch] = img
    vol = Volume(data.astype(np.float32), params.modalities)
    return vol, SegmentationMask(labels, label_space_ref="phantom")


def split_annotations(joint: SegmentationMask, space: LabelSpace) -> tuple[SegmentationMask, SegmentationMask]:
    """Derive anatomy-only and lesion-only annotations from a joint mask.

    Lesion voxels in the anatomy mask take the most frequent anatomy label
    among their 6-neighbours (lowest id on ties), filling blobs from the
    rim inwards. The lesion mask keeps lesions and sets everything else to
    background.
    """
    n = max(int(joint.data.max()) + 1, space.num_classes)
    fill = np.zeros(n, dtype=np.bool_)
    donor = np.zeros(n, dtype=np.bool_)
    fill[list(space.lesion_ids)] = True
    donor[list(space.anatomy_ids)] = True
    anatomy = kernels.fill_by_neighbour_vote(np.ascontiguousarray(joint.data), fill, donor)
    lesion = np.where(fill[joint.data], joint.data, 0).astype(np.uint8)
    return (
        SegmentationMask(anatomy, joint.label_space_ref),
        SegmentationMask(lesion, joint.label_space_ref),
    )


def _native_space(params: PhantomParams) -> LabelSpace:
    from .labelspace import build_label_space

    return build_label_space(phantom_datasets(params))


def volume_digest(vol: Volume) -> str:
    return hashlib.sha256(np.ascontiguousarray(vol.data).tobytes()).hexdigest()


def generate_dataset(
    params: PhantomParams,
    n_volumes: int,
    annotation: str,
    out_dir,
    name: str | None = None,
    modalities: Sequence[str] | None = None,
) -> DatasetSpec:
    """Write ``n_volumes`` phantoms (seeds ``params.seed + i``) as NIfTI plus a
    ``dataset.json`` manifest, and return the matching DatasetSpec.

    ``annotation`` is ``anatomy_only``, ``lesion_only`` or ``joint``.
    """
    if n_volumes < 1:
        raise ValidationError("n_volumes must be at least 1")
    if annotation not in ("anatomy_only", "lesion_only", "joint"):
        raise ValidationError(f"unknown annotation {annotation!r}")
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    if modalities is not None:
        params = replace(params, modalities=tuple(modalities), intensity_means=None)

    space = _native_space(params)
    role = {"anatomy_only": "anatomy", "lesion_only": "lesion", "joint": "joint"}[annotation]
    if role == "joint":
        label_defs = [lab for lab in space.labels if lab.kind is not LabelKind.BACKGROUND]
    else:
        label_defs = list(space.dataset(role).labels)

    entries, records = [], []
    for i in range(n_volumes):
        sub_params = replace(params, seed=params.seed + i)
        vol, joint = generate_phantom(sub_params)
        if annotation == "anatomy_only":
            mask = split_annotations(joint, space)[0]
        elif annotation == "lesion_only":
            mask = split_annotations(joint, space)[1]
        else:
            mask = joint
        subject = f"sub-{i:03d}"
        img_stem = os.path.join(out_dir, f"{subject}.nii")
        if len(params.modalities) == 1:
            img_stem = os.path.join(out_dir, f"{subject}_{params.modalities[0]}.nii")
        images = write_nifti(img_stem, vol)
        mask_path = os.path.join(out_dir, f"{subject}_mask.nii")
        write_nifti(mask_path, mask)
        rel_images = tuple(os.path.basename(p) for p in images)
        entries.append(VolumeEntry(rel_images, os.path.basename(mask_path)))
        records.append({"subject": subject, "seed": sub_params.seed})

    ds_name = name or {"anatomy": "anatomy", "lesion": "lesion", "joint": "joint"}[role]
    spec = DatasetSpec(ds_name, tuple(label_defs), params.modalities, role, tuple(entries))
    write_manifest(
        os.path.join(out_dir, "dataset.json"),
        spec,
        annotation=annotation,
        subjects=records,
        params=params.to_json(),
    )
    return spec
