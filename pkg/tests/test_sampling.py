import numpy as np
import pytest

from hetseg.errors import EmptyClass
from hetseg.manifest import in_memory_dataset
from hetseg.sampling import build_sampler, next_batch
from hetseg.volumes import SegmentationMask, Volume


def _toy_sets(space, rng, n=2, shape=(12, 12, 12)):
    anat, les = space.dataset("anatomy"), space.dataset("wmh")
    a_vols, a_masks, l_vols, l_masks = [], [], [], []
    for _ in range(n):
        m = rng.integers(0, 4, shape).astype(np.uint8)
        a_vols.append(Volume(rng.normal(size=(3, *shape)), ("T1", "IR", "FLAIR")))
        a_masks.append(SegmentationMask(m))
        lm = np.where(rng.random(shape) < 0.05, 4, 0).astype(np.uint8)
        l_vols.append(Volume(rng.normal(size=(2, *shape)), ("T1", "FLAIR")))
        l_masks.append(SegmentationMask(lm))
    return [in_memory_dataset(anat, a_vols, a_masks), in_memory_dataset(les, l_vols, l_masks)]


def test_index_sizes_match_voxel_counts(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    state = build_sampler(sets, wmh_space, seed=0)
    for d, ds in enumerate(sets):
        assert sorted(state.index[d]) == sorted(ds.spec.labelset)
        for c, idx in state.index[d].items():
            brute = sum(int((m.data == c).sum()) for m in ds.masks)
            assert len(idx) == brute > 0


def test_empty_class(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    for m in sets[1].masks:
        m.data[:] = 0
    with pytest.raises(EmptyClass, match="WMH"):
        build_sampler(sets, wmh_space, seed=0)


def test_batch_shapes_and_contents(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng, shape=(40, 40, 40))
    state = build_sampler(sets, wmh_space, seed=1)
    batch = next_batch(state, 7, (32, 32, 32))
    assert batch.intensities.shape == (7, 2, 32, 32, 32) and batch.intensities.dtype == np.float32
    assert batch.labels.shape == (7, 32, 32, 32) and batch.labels.dtype == np.uint8
    for b in range(7):
        ds = sets[[s.name for s in sets].index(batch.dataset_names[b])]
        assert set(np.unique(batch.labels[b])) <= ds.spec.labelset
        # the centre voxel carries the drawn class
        assert batch.labels[b, 16, 16, 16] == batch.classes[b]
        assert 0 in batch.complement_sets[b]
        if batch.dataset_names[b] == "wmh":
            assert batch.complement_sets[b] == {0, 1, 2, 3} and batch.lesion_sourced[b]
        else:
            assert batch.complement_sets[b] == {0, 1, 2, 3, 4} and not batch.lesion_sourced[b]


def test_centre_class_in_source_mask(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    state = build_sampler(sets, wmh_space, seed=2)
    for _ in range(500):
        d, c, v, center = state.draw()
        assert sets[d].masks[v].data[center] == c


def test_uniform_frequencies(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    state = build_sampler(sets, wmh_space, seed=3)
    n = 100_000
    ds_counts = np.zeros(2)
    cls_counts = [dict.fromkeys(sorted(s.spec.labelset), 0) for s in sets]
    for _ in range(n):
        d, c, _, _ = state.draw()
        ds_counts[d] += 1
        cls_counts[d][c] += 1
    assert np.all(np.abs(ds_counts / n - 0.5) <= 0.01)
    for d, counts in enumerate(cls_counts):
        total = sum(counts.values())
        for c, k in counts.items():
            assert abs(k / total - 1 / len(counts)) <= 0.01, (d, c)


def test_determinism(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    a = build_sampler(sets, wmh_space, seed=9)
    b = build_sampler(sets, wmh_space, seed=9)
    for _ in range(3):
        x, y = next_batch(a, 4, (8, 8, 8)), next_batch(b, 4, (8, 8, 8))
        assert np.array_equal(x.intensities, y.intensities) and np.array_equal(x.labels, y.labels)


def test_coverage(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    state = build_sampler(sets, wmh_space, seed=4)
    seen = {state.draw()[:2] for _ in range(300)}
    assert seen == {(0, c) for c in range(4)} | {(1, 0), (1, 4)}


def test_per_dataset_channels(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    state = build_sampler(sets[:1], wmh_space, seed=0, channels=["T1", "IR", "FLAIR"])
    assert next_batch(state, 2, (4, 4, 4)).intensities.shape[1] == 3


def test_patch_complement_mode(wmh_space, rng):
    sets = _toy_sets(wmh_space, rng)
    state = build_sampler(sets[1:], wmh_space, seed=0, complement="patch")
    batch = next_batch(state, 20, (4, 4, 4))
    for lab, comp in zip(batch.labels, batch.complement_sets):
        present = set(np.unique(lab).tolist())
        assert comp == ({0, 1, 2, 3, 4} - present) | {0}
