import itertools

import pytest

from hetseg.errors import LabelCollision, LabelSpaceError, NoSharedModalities, NotFound
from hetseg.labelspace import (
    DatasetSpec,
    LabelDef,
    build_label_space,
    channel_plan,
    complement_set,
    declare_datasets,
    patch_complement_set,
)


def test_union_of_labelsets(wmh_space):
    assert wmh_space.label_names == ["background", "CSF", "GM", "WM", "WMH"]
    assert wmh_space.num_classes == 5
    assert [l.id for l in wmh_space.labels] == [0, 1, 2, 3, 4]
    assert wmh_space.lesion_ids == {4}
    assert wmh_space.anatomy_ids == {1, 2, 3}


def test_single_dataset_space():
    space = build_label_space(
        declare_datasets([{"name": "a", "role": "anatomy", "labels": ["CSF", "GM", "WM"], "modalities": ["T1"]}])
    )
    assert space.num_classes == 4
    assert space.ids == space.dataset("a").labelset


def test_id_collision():
    a = DatasetSpec("a", (LabelDef(1, "tissue", "anatomy"),), ("T1",), "anatomy")
    b = DatasetSpec("b", (LabelDef(1, "lesion", "lesion"),), ("T1",), "lesion")
    with pytest.raises(LabelCollision):
        build_label_space([a, b])


def test_name_collision():
    decl = [
        {"name": "a", "role": "anatomy", "labels": ["X"], "modalities": ["T1"]},
        {"name": "b", "role": "anatomy", "labels": ["X"], "modalities": ["T1"]},
    ]
    with pytest.raises(LabelCollision):
        build_label_space(declare_datasets(decl))


def test_no_shared_modalities():
    decl = [
        {"name": "a", "role": "anatomy", "labels": ["CSF"], "modalities": ["T1", "IR"]},
        {"name": "b", "role": "lesion", "labels": ["WMH"], "modalities": ["FLAIR"]},
    ]
    with pytest.raises(NoSharedModalities):
        build_label_space(declare_datasets(decl))


def test_kind_must_match_role():
    with pytest.raises(LabelSpaceError):
        DatasetSpec("a", (LabelDef(1, "WMH", "lesion"),), ("T1",), "anatomy")


def test_background_is_implicit():
    with pytest.raises(LabelSpaceError):
        DatasetSpec("a", (LabelDef(0, "bg", "anatomy"),), ("T1",), "anatomy")


def test_joint_role_rejected_for_training():
    ds = DatasetSpec("t", (LabelDef(1, "CSF", "anatomy"),), ("T1",), "joint")
    with pytest.raises(LabelSpaceError):
        build_label_space([ds])


def test_complement_sets(wmh_space):
    assert complement_set(wmh_space, "wmh") == {0, 1, 2, 3}
    assert complement_set(wmh_space, "anatomy") == {0, 1, 2, 3, 4}
    with pytest.raises(NotFound):
        complement_set(wmh_space, "nope")


def test_complement_with_two_lesions():
    space = build_label_space(
        declare_datasets(
            [
                {"name": "tumor", "role": "lesion", "labels": ["Edema", "Tumor"], "modalities": ["T1", "T1g", "T2", "FLAIR"]},
                {"name": "anatomy", "role": "anatomy", "labels": ["CSF", "GM", "WM"], "modalities": ["T1", "FLAIR"]},
            ]
        )
    )
    comp = complement_set(space, "tumor")
    assert {space.label_names[i] for i in comp} == {"background", "CSF", "GM", "WM"}


def test_complement_partitions_label_space(wmh_space):
    for ds in wmh_space.datasets:
        comp = complement_set(wmh_space, ds.name)
        assert comp | ds.lesion_ids == wmh_space.ids
        assert not comp & ds.lesion_ids
        assert 0 in comp


def test_patch_complement(wmh_space):
    assert patch_complement_set(wmh_space, [0, 4]) == {0, 1, 2, 3}
    assert patch_complement_set(wmh_space, [0]) == {0, 1, 2, 3, 4}


def test_order_insensitive_membership():
    decl = [
        {"name": "tumor", "role": "lesion", "labels": ["Edema", "Tumor"], "modalities": ["T1", "FLAIR", "T2"]},
        {"name": "anatomy", "role": "anatomy", "labels": ["CSF", "GM", "WM"], "modalities": ["FLAIR", "T1"]},
        {"name": "wmh", "role": "lesion", "labels": ["WMH"], "modalities": ["T1", "FLAIR"]},
    ]
    reference = None
    for perm in itertools.permutations(decl):
        space = build_label_space(declare_datasets(perm))
        names = frozenset(space.label_names)
        comps = {d.name: frozenset(space.label_names[i] for i in complement_set(space, d.name)) for d in space.datasets}
        if reference is None:
            reference = (names, comps)
        assert (names, comps) == reference


def test_channel_plan(wmh_space):
    assert channel_plan(wmh_space, "single_model") == ["T1", "FLAIR"]
    assert channel_plan(wmh_space, "per_dataset", "anatomy") == ["T1", "IR", "FLAIR"]
    for ds in wmh_space.datasets:
        assert set(channel_plan(wmh_space, "single_model")) <= set(channel_plan(wmh_space, "per_dataset", ds.name))
    with pytest.raises(NotFound):
        channel_plan(wmh_space, "per_dataset", "nope")


def test_channel_plan_identical_lists():
    space = build_label_space(
        declare_datasets(
            [
                {"name": "a", "role": "anatomy", "labels": ["CSF"], "modalities": ["T1"]},
                {"name": "b", "role": "lesion", "labels": ["WMH"], "modalities": ["T1"]},
            ]
        )
    )
    assert channel_plan(space, "single_model") == channel_plan(space, "per_dataset", "b") == ["T1"]


def test_tumor_per_dataset_plan():
    space = build_label_space(
        declare_datasets([{"name": "tumor", "role": "lesion", "labels": ["Tumor"], "modalities": ["T1", "T1g", "T2", "FLAIR"]}])
    )
    assert channel_plan(space, "per_dataset", "tumor") == ["T1", "T1g", "T2", "FLAIR"]
