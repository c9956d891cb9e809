import json
import os

import numpy as np
import pytest
from scipy import ndimage

from hetseg.errors import GeometryError, ValidationError
from hetseg.labelspace import build_label_space
from hetseg.manifest import read_manifest
from hetseg.phantoms import (
    PhantomParams,
    generate_dataset,
    generate_phantom,
    phantom_datasets,
    split_annotations,
    volume_digest,
)
from hetseg.training import fuse_labels
from hetseg.volumes import SegmentationMask, read_nifti

SMALL = dict(grid_size=(32, 32, 32), lesion_radius=(1.5, 2.5), n_lesions=(1, 3))


@pytest.fixture(scope="module")
def space():
    return build_label_space(phantom_datasets(PhantomParams()))


@pytest.fixture(scope="module")
def seed7():
    return generate_phantom(PhantomParams(seed=7))


def test_determinism():
    a = generate_phantom(PhantomParams(seed=3, **SMALL))
    b = generate_phantom(PhantomParams(seed=3, **SMALL))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    c = generate_phantom(PhantomParams(seed=4, **SMALL))
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_no_lesions():
    _, joint = generate_phantom(PhantomParams(seed=1, n_lesions=(0, 0), **{k: v for k, v in SMALL.items() if k != "n_lesions"}))
    assert not (joint.data == 4).any()


def test_shells_ordered_outside_in(seed7):
    _, joint = seed7
    d = joint.data
    # walk inward along the central x axis: labels never decrease until lesions
    line = d[:, 32, 32]
    tissue = line[: 32][(line[:32] != 4)]
    assert np.all(np.diff(tissue.astype(int)) >= 0)
    assert set(np.unique(d)) >= {0, 1, 2, 3}


def test_seed7_lesion_fixture(seed7, space):
    _, joint = seed7
    d = joint.data
    lesion = d == 4
    brain = d > 0
    frac = lesion.sum() / brain.sum()
    assert 0 < frac < 0.1
    # 8-adjacency in 3-D: full 26-neighbourhood
    inner = np.isin(d, [2, 3])
    touching = ndimage.binary_dilation(inner, structure=np.ones((3, 3, 3), bool))
    labelled, n = ndimage.label(lesion, structure=np.ones((3, 3, 3), bool))
    assert n >= 1
    for k in range(1, n + 1):
        assert (touching & (labelled == k)).any()
    # lesions sit inside the two innermost shells: the split gives them GM/WM only
    anatomy, _ = split_annotations(joint, space)
    assert set(np.unique(anatomy.data[lesion])) <= {2, 3}


def test_intensity_contrast(seed7):
    vol, joint = seed7
    flair = vol.channels(["FLAIR"])[0]
    t1 = vol.channels(["T1"])[0]
    les, wm = joint.data == 4, joint.data == 3
    assert flair[les].mean() > flair[wm].mean() + 0.3
    assert abs(t1[les].mean() - t1[wm].mean()) < abs(flair[les].mean() - flair[wm].mean())


def test_geometry_error():
    with pytest.raises(GeometryError):
        generate_phantom(PhantomParams(grid_size=(16, 16, 16), lesion_radius=(6.0, 7.0)))


def test_param_validation():
    with pytest.raises(ValidationError):
        PhantomParams(n_tissue_shells=0, tissue_names=())
    with pytest.raises(ValidationError):
        PhantomParams(intensity_noise_sd=-1)
    with pytest.raises(ValidationError):
        PhantomParams(lesion_radius=(3.0, 40.0))


def test_params_json_roundtrip():
    p = PhantomParams(seed=11, modalities=("T1", "IR", "FLAIR"))
    q = PhantomParams.from_json(json.loads(json.dumps(p.to_json())))
    assert q == p


def test_split_no_lesions(space):
    d = np.zeros((6, 6, 6), np.uint8)
    d[1:5, 1:5, 1:5] = 3
    d[2:4, 2:4, 2:4] = 2
    anatomy, lesion = split_annotations(SegmentationMask(d), space)
    assert np.array_equal(anatomy.data, d)
    assert not lesion.data.any()


def test_split_single_voxel_surrounded_by_wm(space):
    d = np.full((5, 5, 5), 3, np.uint8)
    d[2, 2, 2] = 4
    anatomy, lesion = split_annotations(SegmentationMask(d), space)
    assert anatomy.data[2, 2, 2] == 3
    assert lesion.data[2, 2, 2] == 4 and lesion.data.sum() == 4


def test_split_tie_goes_to_lowest_id(space):
    d = np.zeros((3, 3, 3), np.uint8)
    d[1, 1, 1] = 4
    d[0, 1, 1] = d[2, 1, 1] = 3
    d[1, 0, 1] = d[1, 2, 1] = 2
    anatomy, _ = split_annotations(SegmentationMask(d), space)
    assert anatomy.data[1, 1, 1] == 2


def test_split_then_fuse_recovers_joint(space):
    for seed in range(3):
        _, joint = generate_phantom(PhantomParams(seed=seed, **SMALL))
        anatomy, lesion = split_annotations(joint, space)
        fused = fuse_labels(anatomy, lesion, space).data
        les = joint.data == 4
        assert np.array_equal(fused[les], joint.data[les])
        untouched = anatomy.data == joint.data
        assert np.array_equal(fused[untouched], joint.data[untouched])
        assert np.array_equal(fused, joint.data)


def test_label_contradiction(space, seed7):
    _, joint = seed7
    _, lesion = split_annotations(joint, space)
    tissue = np.isin(joint.data, [1, 2, 3])
    assert (lesion.data[tissue] == 0).mean() >= 0.99


def test_generate_dataset_anatomy_only(tmp_path):
    spec = generate_dataset(PhantomParams(seed=100, **SMALL), 4, "anatomy_only", tmp_path / "a")
    assert len(spec.volume_entries) == 4
    assert spec.role.value == "anatomy"
    for e in spec.volume_entries:
        m, _ = read_nifti(tmp_path / "a" / e.mask)
        assert not (m.data == 4).any()
    loaded, doc = read_manifest(tmp_path / "a")
    assert doc["annotation"] == "anatomy_only"
    assert all(os.path.isabs(p) for p in loaded.volume_entries[0].images)


def test_generate_dataset_lesion_only(tmp_path):
    spec = generate_dataset(PhantomParams(seed=200, **SMALL), 2, "lesion_only", tmp_path / "l")
    for e in spec.volume_entries:
        m, _ = read_nifti(tmp_path / "l" / e.mask)
        assert set(np.unique(m.data)) <= {0, 4}


def test_generate_dataset_joint(tmp_path):
    spec = generate_dataset(PhantomParams(seed=300, **SMALL), 1, "joint", tmp_path / "j")
    m, _ = read_nifti(tmp_path / "j" / spec.volume_entries[0].mask)
    assert {1, 4} <= set(np.unique(m.data))


def test_disjoint_seed_ranges_give_distinct_volumes():
    train = [volume_digest(generate_phantom(PhantomParams(seed=s, **SMALL))[0]) for s in range(0, 6)]
    test = [volume_digest(generate_phantom(PhantomParams(seed=s, **SMALL))[0]) for s in range(1000, 1004)]
    assert not set(train) & set(test)
    assert len(set(train)) == len(train)


def test_generate_dataset_bad_n(tmp_path):
    with pytest.raises(ValidationError):
        generate_dataset(PhantomParams(), 0, "joint", tmp_path)
