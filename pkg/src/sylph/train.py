"""Two-stage training: base-detector pretraining, then episodic meta-training.

Pretraining runs batch SGD on base-class images, learning the backbone, both
towers, the class-agnostic box/centerness heads, and one directly-trained code
per base class. Meta-training freezes everything outside the recipe's
trainable set, synthesizes transient codes for each episode's classes through
the hypernetwork, and optimizes the classification focal loss alone on the
query images. Every step appends one JSON line (step, losses, grad norm, lr)
to the stage log.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ops
from .codes import CodeBook
from .data import GlyphDataset
from .detector import (DetectorConfig, ParamDict, assign_targets, base_codebook,
                       box_outputs, conditional_classify, detector_loss,
                       extract_features, grid_locations, init_detector_params,
                       run_tower)
from .hypernet import HypernetConfig, init_hypernet_params, synthesize_code
from .optim import NonFiniteGradError, SGDState, clip_gradients, grad_norm, sgd_step

Tensor = torch.Tensor

SCALAR_PARAMS = frozenset({"hypernet.g", "hypernet.g_b"})


@dataclass
class PretrainConfig:
    lr: float = 1e-2
    steps: int = 5000
    decay_steps: tuple[int, ...] = (3333, 4444)
    decay_factor: float = 0.1
    batch_size: int = 8


@dataclass
class MetaConfig:
    lr: float = 5e-4
    steps: int = 3000
    decay_steps: tuple[int, ...] = (2000, 2600)
    decay_factor: float = 0.1
    episodes_per_step: int = 1
    n_way: int = 3
    k_shot: int = 5


@dataclass
class TrainConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip_norm: float | None = None
    decay_scalars: bool = False  # weight decay on g / g_b

    def validate(self) -> None:
        for phase in (self.pretrain, self.meta):
            ds = phase.decay_steps
            if list(ds) != sorted(set(ds)) or (ds and ds[-1] >= phase.steps):
                raise ValueError(
                    f"decay steps {ds} must be strictly increasing and below {phase.steps}")


def lr_at(step: int, base_lr: float, decay_steps, factor: float) -> float:
    n = sum(1 for d in decay_steps if step >= d)
    return base_lr * factor ** n


@dataclass(frozen=True)
class Recipe:
    name: str
    trainable_prefixes: tuple[str, ...]
    meta_classes: str      # "base" | "all"
    pretrain_classes: str  # "base" | "all"

    def trainable(self, param_name: str) -> bool:
        return any(param_name.startswith(p) for p in self.trainable_prefixes)


RECIPES = {
    "sylph": Recipe("sylph", ("hypernet.", "cls_tower."), "base", "base"),
    "fa": Recipe("fa", ("hypernet.",), "base", "base"),
    "joint": Recipe("joint", ("hypernet.", "cls_tower."), "all", "all"),
}


def get_recipe(name: str) -> Recipe:
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}, expected one of {sorted(RECIPES)}")
    return RECIPES[name]


class JsonlLogger:
    """Collects step records in memory and optionally streams them to disk."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")

    def log(self, **record) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class Episode:
    class_ids: list[int]
    support: dict[int, list[tuple[int, tuple]]]  # class -> [(image_id, box)]
    query_images: list[int]                      # one image per class


def sample_episode(dataset: GlyphDataset, class_pool: list[int], n_way: int,
                   k_shot: int, rng: np.random.Generator) -> Episode:
    """N distinct classes, K support shots each, one query image per class.

    The query image is drawn first; support shots are then drawn from
    instances outside every query image of the episode, falling back to the
    full pool (with replacement if needed) only when a class is too small.
    """
    pool = [c for c in class_pool if dataset.instance_count("train", c) > 0]
    if len(pool) < n_way:
        raise ValueError(f"need {n_way} sampleable classes, have {len(pool)}")
    class_ids = [int(c) for c in rng.choice(pool, size=n_way, replace=False)]
    query_images = []
    for cid in class_ids:
        candidates = dataset.images_containing("train", cid)
        query_images.append(int(candidates[rng.integers(0, len(candidates))]))
    query_set = set(query_images)
    support: dict[int, list[tuple[int, tuple]]] = {}
    for cid in class_ids:
        instances = dataset.instances("train", cid)
        outside = [inst for inst in instances if inst[0] not in query_set]
        pool_c = outside if outside else instances
        replace = len(pool_c) < k_shot
        picks = rng.choice(len(pool_c), size=k_shot, replace=replace)
        support[cid] = [pool_c[i] for i in picks]
    return Episode(class_ids, support, query_images)


def _class_pool(dataset: GlyphDataset, which: str) -> list[int]:
    return list(dataset.class_ids) if which == "all" else list(dataset.base_class_ids)


def _compute_grads(loss: Tensor, params: ParamDict, names: list[str]) -> ParamDict:
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(params[n]))
            for n, g in zip(names, grads)}


def pretrain(dataset: GlyphDataset, det_cfg: DetectorConfig, cfg: TrainConfig,
             seed: int, class_pool: list[int] | None = None,
             trainable=None, log_path: str | Path | None = None
             ) -> tuple[ParamDict, dict]:
    """Batch SGD over images whose annotations fall inside the class pool.

    Returns (params, summary). A non-finite loss aborts the run; the returned
    params are the last good state (the offending step is never applied).
    """
    cfg.validate()
    if class_pool is None:
        class_pool = list(dataset.base_class_ids)
    pool = set(class_pool)
    image_ids = dataset.image_ids_with_classes_within("train", pool)
    if not image_ids:
        raise ValueError("pretrain: no training images for the given class pool")
    gen = torch.Generator().manual_seed(seed)
    params = init_detector_params(det_cfg, sorted(pool), gen)
    if trainable is None:
        trainable = lambda name: True
    names = [n for n in params if trainable(n)]
    for n, p in params.items():
        p.requires_grad_(n in set(names))

    codebook = base_codebook(params)
    channel_of_class = {cid: i for i, cid in enumerate(codebook.class_ids)}
    h, w = dataset.spec.image_size
    gh, gw = h // det_cfg.stride, w // det_cfg.stride
    locations = grid_locations(det_cfg, gh, gw)

    targets: dict[int, tuple[Tensor, Tensor, Tensor]] = {}
    for iid in image_ids:
        anns = dataset.annotations_for("train", iid)
        boxes = torch.tensor([a.box for a in anns], dtype=torch.float32)
        classes = torch.tensor([a.class_id for a in anns], dtype=torch.int64)
        targets[iid] = assign_targets(locations, boxes, classes)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    state = SGDState(cfg.pretrain.lr, cfg.momentum, cfg.weight_decay)
    logger = JsonlLogger(log_path)
    decay_exclude = frozenset() if cfg.decay_scalars else SCALAR_PARAMS
    summary = {"steps_run": 0, "aborted_at": None, "rejected_steps": 0}
    try:
        for step in range(cfg.pretrain.steps) if names else []:
            state.lr = lr_at(step, cfg.pretrain.lr, cfg.pretrain.decay_steps,
                             cfg.pretrain.decay_factor)
            batch = [image_ids[i] for i in rng.choice(
                len(image_ids), size=cfg.pretrain.batch_size,
                replace=len(image_ids) < cfg.pretrain.batch_size)]
            images = dataset.image_batch("train", batch)
            feat = extract_features(params, det_cfg, images)
            cls_feat = run_tower(params, det_cfg, "cls_tower", feat)
            box_feat = run_tower(params, det_cfg, "box_tower", feat)
            ltrb, ctr = box_outputs(params, det_cfg, box_feat)
            logits = conditional_classify(cls_feat, codebook)
            bsz = len(batch)
            labels = torch.stack([targets[i][0] for i in batch])
            ltrb_t = torch.stack([targets[i][1] for i in batch])
            ctr_t = torch.stack([targets[i][2] for i in batch])
            losses = detector_loss(
                logits.reshape(bsz, len(codebook), -1),
                ltrb.reshape(bsz, 4, -1).permute(0, 2, 1),
                ctr.reshape(bsz, -1),
                labels, ltrb_t, ctr_t, channel_of_class, locations, (h, w))
            if not torch.isfinite(losses["total"]):
                summary["aborted_at"] = step
                logger.log(step=step, event="abort", reason="non-finite loss")
                break
            grads = _compute_grads(losses["total"], params, names)
            gnorm = grad_norm(grads)
            if cfg.grad_clip_norm is not None:
                clip_gradients(grads, cfg.grad_clip_norm)
            try:
                sgd_step(params, grads, state, decay_exclude=decay_exclude)
            except NonFiniteGradError:
                summary["rejected_steps"] += 1
            logger.log(step=step, loss_total=float(losses["total"].detach()),
                       loss_cls=float(losses["cls"].detach()), loss_box=float(losses["box"].detach()),
                       loss_ctr=float(losses["ctr"].detach()), grad_norm=gnorm, lr=state.lr)
            summary["steps_run"] = step + 1
    finally:
        logger.close()
    for p in params.values():
        p.requires_grad_(False)
    summary["log"] = logger.records
    return params, summary


def _query_targets(dataset: GlyphDataset, episode: Episode, locations: Tensor,
                   det_cfg: DetectorConfig):
    """Per-query assignment against the episode classes' boxes only."""
    episode_set = set(episode.class_ids)
    labels, ltrbs, ctrs = [], [], []
    for iid in episode.query_images:
        anns = [a for a in dataset.annotations_for("train", iid)
                if a.class_id in episode_set]
        boxes = torch.tensor([a.box for a in anns], dtype=torch.float32).reshape(-1, 4)
        classes = torch.tensor([a.class_id for a in anns], dtype=torch.int64)
        lab, lt, ct = assign_targets(locations, boxes, classes)
        labels.append(lab)
        ltrbs.append(lt)
        ctrs.append(ct)
    return torch.stack(labels), torch.stack(ltrbs), torch.stack(ctrs)


def meta_train(det_params: ParamDict, dataset: GlyphDataset, det_cfg: DetectorConfig,
               hyp_cfg: HypernetConfig, cfg: TrainConfig, recipe: Recipe, seed: int,
               log_path: str | Path | None = None,
               class_pool: list[int] | None = None) -> tuple[ParamDict, dict]:
    """Episodic training of the hypernetwork on top of a pretrained detector.

    Per step: sample an episode, synthesize transient codes for its classes,
    run the queries through the detector with those codes, and update only the
    recipe's trainable parameters with the classification focal loss. The box
    and centerness branches are neither evaluated nor updated.
    """
    cfg.validate()
    params: ParamDict = {k: v.detach().clone() for k, v in det_params.items()}
    gen = torch.Generator().manual_seed(seed + 7919)
    params.update(init_hypernet_params(hyp_cfg, gen))
    names = [n for n in params if recipe.trainable(n)]
    if not names:
        raise ValueError(f"recipe {recipe.name!r} matches zero parameters")
    name_set = set(names)
    for n, p in params.items():
        p.requires_grad_(n in name_set)

    if class_pool is None:
        class_pool = _class_pool(dataset, recipe.meta_classes)
    h, w = dataset.spec.image_size
    locations = grid_locations(det_cfg, h // det_cfg.stride, w // det_cfg.stride)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    state = SGDState(cfg.meta.lr, cfg.momentum, cfg.weight_decay)
    logger = JsonlLogger(log_path)
    decay_exclude = frozenset() if cfg.decay_scalars else SCALAR_PARAMS
    summary = {"steps_run": 0, "aborted_at": None, "rejected_steps": 0}
    try:
        for step in range(cfg.meta.steps):
            state.lr = lr_at(step, cfg.meta.lr, cfg.meta.decay_steps, cfg.meta.decay_factor)
            episode_losses = []
            for _ in range(cfg.meta.episodes_per_step):
                episode = sample_episode(dataset, class_pool, cfg.meta.n_way,
                                         cfg.meta.k_shot, rng)
                transient = CodeBook()
                for cid in episode.class_ids:
                    sup = episode.support[cid]
                    sup_images = torch.stack(
                        [dataset.to_tensor(dataset.image("train", iid)) for iid, _ in sup])
                    sup_boxes = [box for _, box in sup]
                    transient.add(cid, synthesize_code(
                        params, params, det_cfg, hyp_cfg, sup_images, sup_boxes))
                qimgs = dataset.image_batch("train", episode.query_images)
                feat = extract_features(params, det_cfg, qimgs)
                cls_feat = run_tower(params, det_cfg, "cls_tower", feat)
                logits = conditional_classify(cls_feat, transient)
                labels, _, _ = _query_targets(dataset, episode, locations, det_cfg)
                onehot = torch.zeros_like(logits.reshape(len(episode.query_images),
                                                         len(transient), -1))
                for chan, cid in enumerate(transient.class_ids):
                    onehot[:, chan, :][labels == cid] = 1.0
                episode_losses.append(ops.focal_loss(
                    logits.reshape_as(onehot), onehot))
            loss = torch.stack(episode_losses).mean()
            if not torch.isfinite(loss):
                summary["aborted_at"] = step
                logger.log(step=step, event="abort", reason="non-finite loss")
                break
            grads = _compute_grads(loss, params, names)
            gnorm = grad_norm(grads)
            if cfg.grad_clip_norm is not None:
                clip_gradients(grads, cfg.grad_clip_norm)
            try:
                sgd_step(params, grads, state, decay_exclude=decay_exclude)
            except NonFiniteGradError:
                summary["rejected_steps"] += 1
            logger.log(step=step, loss_total=float(loss.detach()), loss_cls=float(loss.detach()),
                       loss_box=0.0, loss_ctr=0.0, grad_norm=gnorm, lr=state.lr)
            summary["steps_run"] = step + 1
    finally:
        logger.close()
    for p in params.values():
        p.requires_grad_(False)
    summary["log"] = logger.records
    return params, summary
