"""Training loops, label fusion and the end-to-end comparison."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from . import metrics
from .errors import DivergedError, ShapeError, ValidationError
from .labelspace import (
    BACKGROUND_ID,
    DatasetRole,
    LabelKind,
    LabelSpace,
    build_label_space,
    channel_plan,
    declare_datasets,
)
from .losses import batch_loss
from .manifest import LoadedDataset
from .network import ModelConfig, ModelHandle, build_model, forward, predict_volume, save_checkpoint
from .phantoms import split_annotations
from .sampling import build_sampler, next_batch
from .seeds import derive_seed
from .volumes import SegmentationMask

if TYPE_CHECKING:
    from .config import ExperimentConfig

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "dice", "ace")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "ace"
    batch_size: int = 7
    patch_size: tuple[int, int, int] = (32, 32, 32)
    iterations: int = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    validation_every: int = 100
    early_stop_patience: int = 5
    seed: int = 0
    complement: str = "dataset"
    base_channels: int = 32
    depth: int = 4
    val_window: tuple[int, int, int] | None = None
    val_stride: tuple[int, int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        for name in ("val_window", "val_stride"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(x) for x in np.broadcast_to(v, 3)))
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.batch_size < 1 or self.validation_every < 1 or self.early_stop_patience < 1:
            raise ValidationError("batch_size, validation_every and early_stop_patience must be >= 1")
        if self.complement not in ("dataset", "patch"):
            raise ValidationError(f"complement must be 'dataset' or 'patch', got {self.complement!r}")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    best_iteration: int | None = None
    best_score: float | None = None
    best_checkpoint: str | None = None
    stopped_early: bool = False
    wall_clock_s: float = 0.0

    @property
    def iterations_run(self) -> int:
        return len(self.losses)

    def to_json(self) -> dict:
        d = asdict(self)
        d["iterations_run"] = self.iterations_run
        return d


def _validate(model: ModelHandle, val: LoadedDataset, masks, class_ids, class_names, cfg: TrainConfig) -> dict:
    preds = [predict_volume(model, v, stride=cfg.val_stride, window=cfg.val_window)[1] for v in val.volumes]
    scores = metrics.dice_scores(preds, masks, class_ids, class_names, val.subjects)
    per_class = {c: float(scores.values[:, k].mean()) for k, c in enumerate(class_names)}
    return {"per_class_dice": per_class, "mean_dice": float(scores.values.mean())}


def _fit(
    model: ModelHandle,
    sampler,
    cfg: TrainConfig,
    loss_kind: str,
    n_classes: int,
    val: LoadedDataset | None,
    val_masks,
    val_ids,
    val_names,
    checkpoint_path,
) -> TrainReport:
    report = TrainReport()
    start = time.perf_counter()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    best_state = None
    bad = 0
    model.train()
    for it in range(1, cfg.iterations + 1):
        batch = next_batch(sampler, cfg.batch_size, cfg.patch_size)
        x = torch.from_numpy(batch.intensities)
        y = torch.from_numpy(batch.labels.astype(np.int64))
        comp = torch.from_numpy(batch.complement_masks(n_classes))
        lesion = torch.from_numpy(batch.lesion_sourced)
        probs = forward(model, x)
        loss = batch_loss(loss_kind, probs, y, comp, lesion)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise DivergedError(it, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        report.losses.append(value)

        if val is not None and (it % cfg.validation_every == 0 or it == cfg.iterations):
            res = _validate(model, val, val_masks, val_ids, val_names, cfg)
            res["iteration"] = it
            report.validations.append(res)
            log.info("iter %d loss %.4f val mean dice %.4f", it, value, res["mean_dice"])
            if report.best_score is None or res["mean_dice"] > report.best_score:
                report.best_score = res["mean_dice"]
                report.best_iteration = it
                best_state = {k: v.detach().clone() for k, v in model.module.state_dict().items()}
                bad = 0
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, {"iteration": it, "loss": loss_kind})
                    report.best_checkpoint = os.fspath(checkpoint_path)
            else:
                bad += 1
                if bad >= cfg.early_stop_patience:
                    report.stopped_early = True
                    break
            model.train()
    if best_state is not None:
        model.module.load_state_dict(best_state)
    else:
        report.best_iteration = report.iterations_run
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, {"iteration": report.iterations_run, "loss": loss_kind})
            report.best_checkpoint = os.fspath(checkpoint_path)
    model.eval()
    report.wall_clock_s = time.perf_counter() - start
    return report


def train_single(
    space: LabelSpace,
    train_data: Sequence[LoadedDataset],
    val_data: LoadedDataset | None,
    cfg: TrainConfig,
    checkpoint_path=None,
) -> tuple[ModelHandle, TrainReport]:
    """One network over the joint label space, fed the shared modalities."""
    channels = channel_plan(space, "single_model")
    model_cfg = ModelConfig(len(channels), space.num_classes, cfg.base_channels, cfg.depth, cfg.patch_size)
    model = build_model(model_cfg, derive_seed(cfg.seed, "init"), channels, [l.id for l in space.labels])
    sampler = build_sampler(train_data, space, derive_seed(cfg.seed, "sampler"), channels, cfg.complement)
    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    val_ids = [l.id for l in space.labels if l.id != BACKGROUND_ID]
    val_names = [l.name for l in space.labels if l.id != BACKGROUND_ID]
    val_masks = val_data.masks if val_data is not None else None
    report = _fit(model, sampler, cfg, cfg.loss, space.num_classes, val_data, val_masks, val_ids, val_names, checkpoint_path)
    return model, report


def local_space(space: LabelSpace, dataset_name: str) -> tuple[LabelSpace, np.ndarray, np.ndarray]:
    """Label space of one dataset on its own, with ids renumbered 1..n.

    Returns ``(local, to_local, to_global)`` lookup tables.
    """
    ds = space.dataset(dataset_name)
    (local_spec,) = declare_datasets(
        [{"name": ds.name, "role": ds.role.value, "labels": [l.name for l in ds.labels], "modalities": ds.modalities}]
    )
    local = build_label_space([local_spec], name=f"{space.name}:{ds.name}")
    to_local = np.zeros(256, dtype=np.uint8)
    to_global = np.zeros(local.num_classes, dtype=np.int64)
    for g, l in zip(ds.labels, local_spec.labels):
        to_local[g.id] = l.id
        to_global[l.id] = g.id
    return local, to_local, to_global


def project_mask(joint: SegmentationMask, space: LabelSpace, dataset_name: str) -> SegmentationMask:
    """What a dataset's annotators would have drawn on a jointly labelled mask."""
    ds = space.dataset(dataset_name)
    anatomy, lesion = split_annotations(joint, space)
    return anatomy if ds.role is DatasetRole.ANATOMY else lesion


def train_multi(
    space: LabelSpace,
    per_dataset: Sequence[LoadedDataset],
    val_data: LoadedDataset | None,
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[list[ModelHandle], list[TrainReport]]:
    """One cross-entropy network per dataset, each with all of its modalities
    and only its own labels. Model k uses seed ``cfg.seed + k``."""
    models, reports = [], []
    for k, ds in enumerate(per_dataset):
        sub_cfg = TrainConfig(**{**asdict(cfg), "loss": "ce", "seed": cfg.seed + k})
        local, to_local, to_global = local_space(space, ds.name)
        channels = channel_plan(space, "per_dataset", ds.name)
        local_ds = LoadedDataset(
            local.dataset(ds.name),
            ds.volumes,
            [SegmentationMask(to_local[m.data], local.name, ds.name) for m in ds.masks],
            ds.subjects,
        )
        model_cfg = ModelConfig(len(channels), local.num_classes, cfg.base_channels, cfg.depth, cfg.patch_size)
        model = build_model(model_cfg, derive_seed(sub_cfg.seed, "init"), channels, to_global.tolist())
        sampler = build_sampler([local_ds], local, derive_seed(sub_cfg.seed, "sampler"), channels)
        torch.manual_seed(derive_seed(sub_cfg.seed, "torch"))
        val_masks = None
        if val_data is not None:
            val_masks = [project_mask(m, space, ds.name) for m in val_data.masks]
        global_ids = [l.id for l in space.dataset(ds.name).labels]
        names = [l.name for l in space.dataset(ds.name).labels]
        ckpt = os.path.join(checkpoint_dir, f"multi_{ds.name}.ckpt") if checkpoint_dir else None
        # model outputs are mapped back to global ids by predict_volume
        report = _fit(model, sampler, sub_cfg, "ce", local.num_classes, val_data, val_masks, global_ids, names, ckpt)
        models.append(model)
        reports.append(report)
    return models, reports


def fuse_labels(anatomy_mask, lesion_mask, space: LabelSpace | None = None) -> SegmentationMask:
    """Overwrite the anatomy labelling with every non-background lesion voxel."""
    a = np.asarray(getattr(anatomy_mask, "data", anatomy_mask))
    l = np.asarray(getattr(lesion_mask, "data", lesion_mask))
    if a.shape != l.shape:
        raise ShapeError(f"anatomy mask {a.shape} and lesion mask {l.shape} differ in shape")
    if space is not None:
        ok_a = np.array(sorted({BACKGROUND_ID} | space.anatomy_ids), dtype=a.dtype)
        ok_l = np.array(sorted({BACKGROUND_ID} | space.lesion_ids), dtype=l.dtype)
        if not np.isin(a, ok_a).all():
            raise ValidationError("anatomy mask holds labels that are not anatomy labels")
        if not np.isin(l, ok_l).all():
            raise ValidationError("lesion mask holds labels that are not lesion labels")
    out = np.where(l != BACKGROUND_ID, l, a).astype(np.uint8)
    ref = getattr(anatomy_mask, "label_space_ref", space.name if space is not None else "joint")
    return SegmentationMask(out, ref)


def predict_multi(models: Sequence[ModelHandle], space: LabelSpace, vol, stride=None, window=None) -> SegmentationMask:
    """Run every per-dataset model and fuse lesions over anatomy."""
    anatomy = np.zeros(vol.shape, dtype=np.uint8)
    lesion = np.zeros(vol.shape, dtype=np.uint8)
    for model in models:
        _, mask = predict_volume(model, vol, stride=stride, window=window)
        ids = set(model.label_ids) - {BACKGROUND_ID}
        if ids <= space.lesion_ids:
            lesion = np.where(mask.data != BACKGROUND_ID, mask.data, lesion)
        else:
            anatomy = np.where(mask.data != BACKGROUND_ID, mask.data, anatomy)
    return fuse_labels(anatomy, lesion, space)


# --------------------------------------------------------------------------
# end-to-end experiment
# --------------------------------------------------------------------------

SYSTEM_LABELS = {"ace": "ACE", "ce": "Naive CE", "dice": "Naive Dice", "multi": "Multi UNet"}


@dataclass
class ExperimentReport:
    doc: dict
    table: str
    csv: str

    def mean_dice(self, system: str, cls: str) -> float:
        return self.doc["systems"][system]["summary"][cls]["mean"]

    def wilcoxon(self, a: str, b: str) -> dict:
        for w in self.doc["wilcoxon"]:
            if {w["a"], w["b"]} == {a, b}:
                return w
        raise KeyError((a, b))


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(exp: "ExperimentConfig", out_dir=None) -> ExperimentReport:
    """Train every configured system, evaluate on the joint test set and
    write ``report.json``, ``table.txt``, ``dice.csv``, ``run.json``."""
    from .config import prepare_data, provenance

    out_dir = os.fspath(out_dir or exp.output_root())
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    _dump(os.path.join(out_dir, "run.json"), provenance(exp))

    space, train_sets, val_set, test_set = prepare_data(exp, os.path.join(out_dir, "data"))
    class_ids = [l.id for l in space.labels if l.id != BACKGROUND_ID]
    class_names = [l.name for l in space.labels if l.id != BACKGROUND_ID]
    stride, window = exp.eval_stride, exp.eval_window

    preds: dict[str, list[SegmentationMask]] = {}
    training: dict[str, dict] = {}
    timings: dict[str, float] = {}
    partial_path = os.path.join(out_dir, "partial_report.json")
    try:
        for system in exp.systems:
            seed = derive_seed(exp.master_seed, f"train/{system}")
            cfg = TrainConfig(**{**asdict(exp.train), "seed": seed, "loss": "ce" if system == "multi" else system})
            log.info("training system %s", system)
            if system == "multi":
                models, reports = train_multi(space, train_sets, val_set, cfg, ckpt_dir)
                preds[system] = [predict_multi(models, space, v, stride, window) for v in test_set.volumes]
                training[system] = {ds.name: _train_summary(r) for ds, r in zip(train_sets, reports)}
                timings[system] = sum(r.wall_clock_s for r in reports)
            else:
                model, report = train_single(space, train_sets, val_set, cfg, os.path.join(ckpt_dir, f"single_{system}.ckpt"))
                preds[system] = [predict_volume(model, v, stride=stride, window=window)[1] for v in test_set.volumes]
                training[system] = _train_summary(report)
                timings[system] = report.wall_clock_s
            _dump(partial_path, {"completed": list(preds), "training": training})
    except Exception:
        log.exception("experiment aborted; partial results in %s", partial_path)
        raise

    scores = {
        s: metrics.dice_scores(preds[s], test_set.masks, class_ids, class_names, test_set.subjects) for s in exp.systems
    }
    summaries = {s: metrics.summarize(scores[s]) for s in exp.systems}
    tissue = [l.name for l in space.labels if l.kind is LabelKind.ANATOMY]
    lesion = [l.name for l in space.labels if l.kind is LabelKind.LESION]

    systems_doc = {}
    for s in exp.systems:
        systems_doc[s] = {
            "label": SYSTEM_LABELS[s],
            "summary": {c: {"mean": v.mean, "std": v.std, "n": v.n} for c, v in summaries[s].items()},
            "per_subject": {
                subj: dict(zip(class_names, scores[s].values[i].tolist())) for i, subj in enumerate(test_set.subjects)
            },
            "mean_tissue_dice": float(np.mean([summaries[s][c].mean for c in tissue])) if tissue else None,
            "mean_lesion_dice": float(np.mean([summaries[s][c].mean for c in lesion])) if lesion else None,
        }
    def _test(entry, x, y):
        try:
            res = metrics.wilcoxon_signed_rank(x, y)
            entry.update(statistic=res.statistic, p_value=res.p_value, n_effective=res.n_effective, method=res.method)
        except ValidationError as exc:
            entry["error"] = str(exc)
        return entry

    tests, per_class_tests = [], []
    for i, a in enumerate(exp.systems):
        for b in exp.systems[i + 1 :]:
            entry = {"a": a, "b": b, "population": "per-subject mean Dice over non-background classes"}
            tests.append(_test(entry, scores[a].subject_means(), scores[b].subject_means()))
            for k, cls in enumerate(class_names):
                entry = {"a": a, "b": b, "class": cls, "population": "per-subject Dice of one class"}
                per_class_tests.append(_test(entry, scores[a].values[:, k], scores[b].values[:, k]))

    doc = {
        "schema_version": 1,
        "name": exp.name,
        "config_hash": exp.config_hash(),
        "master_seed": exp.master_seed,
        "seeds": exp.seeds(),
        "classes": class_names,
        "tissue_classes": tissue,
        "lesion_classes": lesion,
        "test_subjects": list(test_set.subjects),
        "systems": systems_doc,
        "wilcoxon": tests,
        "wilcoxon_per_class": per_class_tests,
        "training": training,
    }
    table = metrics.render_table({SYSTEM_LABELS[s]: summaries[s] for s in exp.systems}, class_names)
    csv_text = metrics.scores_csv(scores)
    _dump(os.path.join(out_dir, "report.json"), doc)
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "dice.csv"), "w") as fh:
        fh.write(csv_text)
    _dump(os.path.join(out_dir, "timings.json"), timings)
    if os.path.exists(partial_path):
        os.remove(partial_path)
    return ExperimentReport(doc, table, csv_text)


def _train_summary(report: TrainReport) -> dict:
    head = report.losses[: min(20, len(report.losses))]
    tail = report.losses[-min(20, len(report.losses)) :]
    return {
        "iterations_run": report.iterations_run,
        "best_iteration": report.best_iteration,
        "best_val_mean_dice": report.best_score,
        "stopped_early": report.stopped_early,
        "initial_loss": float(np.mean(head)),
        "final_loss": float(np.mean(tail)),
        "validations": report.validations,
    }
