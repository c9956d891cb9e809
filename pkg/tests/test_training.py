import numpy as np
import pytest
import torch

from hetseg import training
from hetseg.errors import DivergedError, ShapeError, ValidationError
from hetseg.labelspace import build_label_space
from hetseg.manifest import in_memory_dataset
from hetseg.phantoms import PhantomParams, generate_phantom, phantom_datasets, split_annotations
from hetseg.training import TrainConfig, fuse_labels, local_space, predict_multi, train_multi, train_single

SMALL = dict(grid_size=(24, 24, 24), lesion_radius=(1.5, 2.0), n_lesions=(1, 2), modalities=("T1", "IR", "FLAIR"))
FAST = dict(batch_size=2, patch_size=(8, 8, 8), base_channels=4, depth=2, validation_every=2)


@pytest.fixture(scope="module")
def data():
    params = PhantomParams(**SMALL)
    specs = phantom_datasets(params, ("T1", "IR", "FLAIR"), ("T1", "FLAIR"))
    space = build_label_space(specs)
    anat_v, anat_m, les_v, les_m, joint_v, joint_m = [], [], [], [], [], []
    for seed in range(4):
        vol, joint = generate_phantom(PhantomParams(seed=seed, **SMALL))
        a, l = split_annotations(joint, space)
        if seed < 2:
            anat_v.append(vol), anat_m.append(a)
        elif seed < 3:
            les_v.append(vol), les_m.append(l)
        else:
            joint_v.append(vol), joint_m.append(joint)
    anatomy = in_memory_dataset(space.dataset("anatomy"), anat_v, anat_m)
    lesion = in_memory_dataset(space.dataset("lesion"), les_v, les_m)
    val = in_memory_dataset(space.dataset("anatomy"), joint_v, joint_m)
    return space, anatomy, lesion, val


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(iterations=0)
    with pytest.raises(ValidationError):
        TrainConfig(lr=0)
    with pytest.raises(ValidationError):
        TrainConfig(loss="focal")


def test_single_iteration(data):
    space, anatomy, lesion, _ = data
    _, report = train_single(space, [anatomy, lesion], None, TrainConfig(iterations=1, **FAST))
    assert len(report.losses) == 1 and report.iterations_run == 1


def test_ce_equals_ace_without_lesion_data(data):
    _, anatomy, _, _ = data
    space = build_label_space([anatomy.spec])
    _, ce = train_single(space, [anatomy], None, TrainConfig(loss="ce", iterations=4, seed=3, **FAST))
    _, ace = train_single(space, [anatomy], None, TrainConfig(loss="ace", iterations=4, seed=3, **FAST))
    assert np.max(np.abs(np.subtract(ce.losses, ace.losses))) <= 1e-9


def test_training_is_deterministic(data):
    space, anatomy, lesion, val = data
    cfg = TrainConfig(iterations=3, seed=5, **FAST)
    m1, r1 = train_single(space, [anatomy, lesion], val, cfg)
    m2, r2 = train_single(space, [anatomy, lesion], val, cfg)
    assert r1.losses == r2.losses and r1.validations == r2.validations
    s1, s2 = m1.module.state_dict(), m2.module.state_dict()
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_ace_complements_always_hold_background(data, monkeypatch):
    space, anatomy, lesion, _ = data
    seen = []
    real = training.batch_loss

    def spy(kind, probs, labels, comp, lesion_sourced, **kw):
        seen.append((comp.clone(), lesion_sourced.clone()))
        return real(kind, probs, labels, comp, lesion_sourced, **kw)

    monkeypatch.setattr(training, "batch_loss", spy)
    train_single(space, [anatomy, lesion], None, TrainConfig(loss="ace", iterations=5, **FAST))
    assert seen
    for comp, les in seen:
        assert bool(comp[:, 0].all())
        assert torch.equal(~comp[:, 4], les)


def test_validation_and_checkpoint(data, tmp_path):
    space, anatomy, lesion, val = data
    ckpt = tmp_path / "best.ckpt"
    _, report = train_single(space, [anatomy, lesion], val, TrainConfig(iterations=4, **FAST), ckpt)
    assert [v["iteration"] for v in report.validations] == [2, 4]
    assert report.best_checkpoint == str(ckpt) and ckpt.exists()
    assert set(report.validations[0]["per_class_dice"]) == {"CSF", "GM", "WM", "WMH"}


def test_divergence_aborts(data, monkeypatch):
    space, anatomy, lesion, _ = data
    monkeypatch.setattr(training, "batch_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(DivergedError) as exc:
        train_single(space, [anatomy, lesion], None, TrainConfig(iterations=3, **FAST))
    assert exc.value.iteration == 1


def test_multi_models(data):
    space, anatomy, lesion, val = data
    models, reports = train_multi(space, [anatomy, lesion], val, TrainConfig(iterations=2, **FAST))
    assert [m.config.in_channels for m in models] == [3, 2]
    assert [m.config.num_classes for m in models] == [4, 2]
    assert models[0].label_ids == (0, 1, 2, 3) and models[1].label_ids == (0, 4)
    assert models[0].n_parameters() != models[1].n_parameters()
    fused = predict_multi(models, space, val.volumes[0], window=(8, 8, 8))
    assert fused.shape == val.volumes[0].shape
    assert set(np.unique(fused.data)) <= {0, 1, 2, 3, 4}


def test_local_space(data):
    space = data[0]
    local, to_local, to_global = local_space(space, "lesion")
    assert local.num_classes == 2 and to_local[4] == 1 and to_global.tolist() == [0, 4]


# ---------------------------------------------------------------- fusion


def test_fuse_all_background_lesion(rng):
    a = rng.integers(0, 4, (5, 5, 5)).astype(np.uint8)
    assert np.array_equal(fuse_labels(a, np.zeros_like(a)).data, a)


def test_fuse_single_lesion_voxel():
    a = np.full((3, 3, 3), 3, np.uint8)
    l = np.zeros_like(a)
    l[1, 1, 1] = 4
    out = fuse_labels(a, l).data
    assert out[1, 1, 1] == 4 and (out == 3).sum() == 26


def test_fuse_properties_random(rng):
    for _ in range(1000):
        shape = tuple(rng.integers(1, 6, 3))
        a = rng.integers(0, 4, shape).astype(np.uint8)
        l = np.where(rng.random(shape) < 0.3, 4, 0).astype(np.uint8)
        f = fuse_labels(a, l).data
        assert np.array_equal(fuse_labels(f, l).data, f)
        assert np.all(f[l != 0] == l[l != 0])
        assert np.array_equal(f[l == 0], a[l == 0])


def test_fuse_errors(wmh_space):
    with pytest.raises(ShapeError):
        fuse_labels(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValidationError):
        fuse_labels(np.full((2, 2, 2), 4), np.zeros((2, 2, 2)), wmh_space)
