"""COCO-style evaluation and the incremental / ablation / sweep protocols.

AP is the 101-point interpolated average precision, averaged over IoU
thresholds 0.50:0.05:0.95; split APs (base / novel) are unweighted means of
per-class APs over classes that have at least one ground truth. Classes
without ground truth are excluded and signalled, never scored 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import ops
from .codes import CodeBook
from .data import GlyphDataset
from .detector import Detection, DetectorConfig, ParamDict, decode_per_class, forward_batch
from .hypernet import HypernetConfig, generate_all_codes
from .train import MetaConfig, Recipe, TrainConfig, get_recipe, meta_train, pretrain

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _iou_matrix_np(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = boxes_a[:, None, :]
    b = boxes_b[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    return out


def _greedy_labels(iou_mat: np.ndarray, iou_thresh: float) -> list[bool]:
    """Rows = detections in descending-score order, cols = ground truths."""
    n_det, n_gt = iou_mat.shape
    taken = np.zeros(n_gt, dtype=bool)
    labels = []
    for i in range(n_det):
        row = np.where(taken, -1.0, iou_mat[i])
        j = int(row.argmax()) if n_gt else -1
        if j >= 0 and row[j] >= iou_thresh:
            taken[j] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels


def match_predictions(detections: list[Detection], gt_boxes, iou_thresh: float) -> list[bool]:
    """Greedy TP/FP labels for one (image, class) pair.

    Detections must already be sorted by descending score. Each detection
    matches the unmatched ground truth with the highest IoU, provided that
    IoU >= iou_thresh; each ground truth matches at most once.
    """
    scores = [d.score for d in detections]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("match_predictions: detections must be sorted by descending score")
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if not detections:
        return []
    det = np.asarray([d.box for d in detections], dtype=np.float64)
    return _greedy_labels(_iou_matrix_np(det, gt), iou_thresh)


def average_precision(labels, n_gt: int) -> float | None:
    """101-point interpolated AP from score-ordered TP/FP labels.

    Returns None when n_gt == 0: the class is excluded, not scored zero.
    """
    if n_gt == 0:
        return None
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0:
        return 0.0
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision monotonized from the right
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(interp.mean())


@dataclass
class EvalReport:
    ap: float | None = None
    ap50: float | None = None
    ap_base: float | None = None
    ap_novel: float | None = None
    ap50_base: float | None = None
    ap50_novel: float | None = None
    per_class_ap: dict[int, float] = field(default_factory=dict)
    per_class_ap50: dict[int, float] = field(default_factory=dict)
    excluded_class_ids: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    n_images: int = 0
    seed_stats: dict | None = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "ap", "ap50", "ap_base", "ap_novel", "ap50_base", "ap50_novel",
            "excluded_class_ids", "warnings", "n_images", "seed_stats")}
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["per_class_ap50"] = {str(k): v for k, v in self.per_class_ap50.items()}
        return d


PerImageDetections = dict[int, dict[int, list[Detection]]]  # image_id -> class -> dets


def infer_split(det_params: ParamDict, det_cfg: DetectorConfig, codebook: CodeBook,
                dataset: GlyphDataset, split: str = "eval",
                score_thresh: float = 0.05, nms_iou: float = 0.6,
                image_ids: list[int] | None = None,
                batch_size: int = 16) -> PerImageDetections:
    """One forward pass per image over the whole codebook; per-class NMS, no cap."""
    if image_ids is None:
        image_ids = dataset.image_ids(split)
    h, w = dataset.spec.image_size
    out: PerImageDetections = {}
    for start in range(0, len(image_ids), batch_size):
        chunk = image_ids[start:start + batch_size]
        images = dataset.image_batch(split, chunk)
        with torch.no_grad():
            fwd = forward_batch(det_params, det_cfg, codebook, images)
        for i, iid in enumerate(chunk):
            out[iid] = decode_per_class(
                fwd["cls_logits"][i], fwd["ltrb"][i], fwd["ctr"][i], det_cfg,
                codebook.class_ids, (h, w), score_thresh, nms_iou)
    return out


def cap_detections(per_image: PerImageDetections, max_dets: int) -> PerImageDetections:
    """Keep the max_dets highest-scoring detections per image, across classes."""
    capped: PerImageDetections = {}
    for iid, by_class in per_image.items():
        merged = [d for dets in by_class.values() for d in dets]
        merged.sort(key=lambda d: -d.score)
        kept = merged[:max_dets]
        capped[iid] = {cid: [d for d in kept if d.class_id == cid] for cid in by_class}
    return capped


def compute_report(per_image: PerImageDetections, dataset: GlyphDataset,
                   split: str = "eval", class_subset: list[int] | None = None,
                   codebook_classes: list[int] | None = None) -> EvalReport:
    """AP aggregation from per-class detection lists."""
    report = EvalReport(n_images=len(per_image))
    gt_by_class: dict[int, dict[int, list]] = {}
    for a in dataset.annotations[split]:
        if a.image_id in per_image:
            gt_by_class.setdefault(a.class_id, {}).setdefault(a.image_id, []).append(a.box)
    classes = sorted(gt_by_class)
    if class_subset is not None:
        classes = [c for c in classes if c in set(class_subset)]
    enrolled = set(codebook_classes) if codebook_classes is not None else None
    for cid in classes:
        if enrolled is not None and cid not in enrolled:
            report.excluded_class_ids.append(cid)
            report.warnings.append(f"class {cid} has ground truth but is not enrolled; excluded")
            continue
        n_gt = sum(len(b) for b in gt_by_class[cid].values())
        dets_by_image: dict[int, list[Detection]] = {}
        iou_mats: dict[int, np.ndarray] = {}
        for iid, by_class in per_image.items():
            image_dets = by_class.get(cid, [])
            if image_dets:
                image_dets = sorted(image_dets, key=lambda d: -d.score)
                dets_by_image[iid] = image_dets
                det = np.asarray([d.box for d in image_dets], dtype=np.float64)
                gt = np.asarray(gt_by_class[cid].get(iid, []), dtype=np.float64).reshape(-1, 4)
                iou_mats[iid] = _iou_matrix_np(det, gt)
        order = sorted(((iid, d) for iid, lst in dets_by_image.items() for d in lst),
                       key=lambda t: -t[1].score)
        aps = []
        for thresh in IOU_THRESHOLDS:
            labels = {iid: iter(_greedy_labels(iou_mats[iid], thresh))
                      for iid in dets_by_image}
            ordered = [next(labels[iid]) for iid, _ in order]
            aps.append(average_precision(ordered, n_gt))
        report.per_class_ap[cid] = float(np.mean([a for a in aps]))
        report.per_class_ap50[cid] = aps[0]

    def mean_over(ids) -> float | None:
        vals = [report.per_class_ap[c] for c in ids if c in report.per_class_ap]
        return float(np.mean(vals)) if vals else None

    def mean50_over(ids) -> float | None:
        vals = [report.per_class_ap50[c] for c in ids if c in report.per_class_ap50]
        return float(np.mean(vals)) if vals else None

    scored = list(report.per_class_ap)
    report.ap = mean_over(scored)
    report.ap50 = mean50_over(scored)
    report.ap_base = mean_over(dataset.base_class_ids)
    report.ap_novel = mean_over(dataset.novel_class_ids)
    report.ap50_base = mean50_over(dataset.base_class_ids)
    report.ap50_novel = mean50_over(dataset.novel_class_ids)
    return report


def evaluate(det_params: ParamDict, det_cfg: DetectorConfig, codebook: CodeBook,
             dataset: GlyphDataset, split: str = "eval", score_thresh: float = 0.05,
             nms_iou: float = 0.6, max_dets: int = 100, apply_cap: bool = True,
             image_ids: list[int] | None = None,
             class_subset: list[int] | None = None) -> EvalReport:
    """Single-pass inference over all enrolled classes, then per-split AP."""
    per_image = infer_split(det_params, det_cfg, codebook, dataset, split,
                            score_thresh, nms_iou, image_ids)
    if apply_cap:
        per_image = cap_detections(per_image, max_dets)
    return compute_report(per_image, dataset, split, class_subset,
                          codebook_classes=codebook.class_ids)

@dataclass
class EnrollmentEvent:
    step: int
    class_ids: list[int]


def incremental_protocol(det_params: ParamDict, det_cfg: DetectorConfig,
                         hyp_params: ParamDict, hyp_cfg: HypernetConfig,
                         dataset: GlyphDataset, schedule: list[EnrollmentEvent],
                         k_shots: int = 10, runs: int = 5, seed: int = 0,
                         split: str = "eval", score_thresh: float = 0.05,
                         nms_iou: float = 0.6, max_dets: int = 100,
                         image_ids: list[int] | None = None) -> dict:
    """Sequential enrollment with an evaluation after every schedule step.

    Forgetting for a class is its AP at the final step minus its AP at the
    step it was enrolled, both computed with the per-image detection cap
    disabled (the cap is the one sanctioned cross-class interaction).
    Repeated over `runs` support-sampling seeds; reports mean and std.
    """
    known = set(dataset.class_ids)
    seen: set[int] = set()
    for ev in schedule:
        for cid in ev.class_ids:
            if cid not in known:
                raise ValueError(f"incremental_protocol: unknown class {cid} in schedule")
            if cid in seen:
                raise ValueError(f"incremental_protocol: class {cid} scheduled twice")
            seen.add(cid)
    run_results = []
    for run in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, run]))
        book = CodeBook()
        enroll_ap: dict[int, float] = {}
        step_reports = []
        last_nocap = None
        for ev in schedule:
            generate_all_codes(dataset, det_params, hyp_params, det_cfg, hyp_cfg,
                               k_shots, mode="hypernet", class_ids=ev.class_ids,
                               rng=rng, into=book)
            per_image = infer_split(det_params, det_cfg, book, dataset, split,
                                    score_thresh, nms_iou, image_ids)
            capped = cap_detections(per_image, max_dets)
            report = compute_report(capped, dataset, split,
                                    codebook_classes=book.class_ids)
            nocap = compute_report(per_image, dataset, split,
                                   codebook_classes=book.class_ids)
            for cid in ev.class_ids:
                if cid in nocap.per_class_ap:
                    enroll_ap[cid] = nocap.per_class_ap[cid]
            step_reports.append({"step": ev.step, "enrolled": sorted(book.class_ids),
                                 "report": report.to_dict()})
            last_nocap = nocap
        forgetting = {cid: last_nocap.per_class_ap[cid] - ap0
                      for cid, ap0 in enroll_ap.items()
                      if cid in last_nocap.per_class_ap}
        run_results.append({"steps": step_reports, "forgetting": forgetting,
                            "final_ap": step_reports[-1]["report"]["ap"]})
    final_aps = [r["final_ap"] for r in run_results if r["final_ap"] is not None]
    all_forget = [abs(v) for r in run_results for v in r["forgetting"].values()]
    return {
        "runs": run_results,
        "seed_stats": {
            "final_ap_mean": float(np.mean(final_aps)) if final_aps else None,
            "final_ap_std": float(np.std(final_aps)) if final_aps else None,
            "max_abs_forgetting": max(all_forget) if all_forget else 0.0,
        },
    }


ABLATION_FLAG_KEYS = ("use_bias", "use_gn", "use_l2", "use_g", "n_shared_convs")

# Grid mirroring the modeling-choices table: every flag combination exercised,
# from the no-norm baseline up to the full configuration.
DEFAULT_ABLATION_GRID = [
    {"use_bias": False, "use_gn": False, "use_l2": False, "use_g": False, "n_shared_convs": 0},
    {"use_bias": True, "use_gn": False, "use_l2": False, "use_g": False, "n_shared_convs": 0},
    {"use_bias": True, "use_gn": True, "use_l2": False, "use_g": True, "n_shared_convs": 0},
    {"use_bias": True, "use_gn": False, "use_l2": True, "use_g": True, "n_shared_convs": 0},
    {"use_bias": True, "use_gn": True, "use_l2": True, "use_g": True, "n_shared_convs": 0},
    {"use_bias": True, "use_gn": True, "use_l2": True, "use_g": True, "n_shared_convs": 1},
    {"use_bias": True, "use_gn": True, "use_l2": True, "use_g": True, "n_shared_convs": 2},
    {"use_bias": True, "use_gn": True, "use_l2": True, "use_g": False, "n_shared_convs": 2},
    {"use_bias": False, "use_gn": True, "use_l2": True, "use_g": False, "n_shared_convs": 2},
]


def _row_hyp_cfg(base: HypernetConfig, row: dict) -> HypernetConfig:
    from dataclasses import replace
    unknown = set(row) - set(ABLATION_FLAG_KEYS)
    if unknown:
        raise ValueError(f"ablation row has unknown keys {sorted(unknown)}")
    return replace(base, **row)


def run_meta_and_eval(pretrain_params: ParamDict, dataset: GlyphDataset,
                      det_cfg: DetectorConfig, hyp_cfg: HypernetConfig,
                      train_cfg: TrainConfig, recipe: Recipe, seed: int,
                      k_shots: int = 10, score_thresh: float = 0.05,
                      nms_iou: float = 0.6, max_dets: int = 100,
                      class_subset: list[int] | None = None,
                      log_path=None) -> tuple[EvalReport, dict, ParamDict]:
    """meta-train -> enroll every class through the hypernetwork -> evaluate."""
    params, summary = meta_train(pretrain_params, dataset, det_cfg, hyp_cfg,
                                 train_cfg, recipe, seed, log_path=log_path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    book = generate_all_codes(dataset, params, params, det_cfg, hyp_cfg,
                              k_shots, mode="hypernet", rng=rng,
                              class_ids=class_subset)
    report = evaluate(params, det_cfg, book, dataset, score_thresh=score_thresh,
                      nms_iou=nms_iou, max_dets=max_dets, class_subset=class_subset)
    return report, summary, params


def ablation_grid(pretrain_params: ParamDict, dataset: GlyphDataset,
                  det_cfg: DetectorConfig, base_hyp_cfg: HypernetConfig,
                  train_cfg: TrainConfig, rows: list[dict] | None = None,
                  seeds: tuple[int, ...] = (0, 1, 2), k_shots: int = 10,
                  recipe_name: str = "sylph") -> list[dict]:
    """Meta-train + evaluate one row per flag setting, same pretrain and seeds."""
    if rows is None:
        rows = DEFAULT_ABLATION_GRID
    results = []
    for row in rows:
        hyp_cfg = _row_hyp_cfg(base_hyp_cfg, row)
        aps, novel, base, ap50s, novel50, base50 = [], [], [], [], [], []
        for seed in seeds:
            report, _, _ = run_meta_and_eval(pretrain_params, dataset, det_cfg,
                                             hyp_cfg, train_cfg, get_recipe(recipe_name),
                                             seed, k_shots)
            aps.append(report.ap)
            novel.append(report.ap_novel)
            base.append(report.ap_base)
            ap50s.append(report.ap50)
            novel50.append(report.ap50_novel)
            base50.append(report.ap50_base)
        med = lambda xs: float(np.median([x for x in xs if x is not None])) if any(
            x is not None for x in xs) else None
        results.append({**{k: row[k] for k in ABLATION_FLAG_KEYS},
                        "ap": med(aps), "ap_novel": med(novel), "ap_base": med(base),
                        "ap50": med(ap50s), "ap50_novel": med(novel50),
                        "ap50_base": med(base50),
                        "seeds": list(seeds)})
    return results


def ablation_csv(rows: list[dict]) -> str:
    """Flat table, flag columns first in the conventional order."""
    header = ["bias", "gn", "l2", "g", "n_conv", "ap", "ap_novel", "ap_base",
              "ap50", "ap50_novel", "ap50_base"]
    lines = [",".join(header)]
    for r in rows:
        vals = [int(r["use_bias"]), int(r["use_gn"]), int(r["use_l2"]), int(r["use_g"]),
                r["n_shared_convs"]]
        vals += [f"{r[k]:.4f}" if r[k] is not None else "" for k in
                 ("ap", "ap_novel", "ap_base", "ap50", "ap50_novel", "ap50_base")]
        lines.append(",".join(str(v) for v in vals))
    return "\n".join(lines) + "\n"


def base_count_sweep(dataset: GlyphDataset, det_cfg: DetectorConfig,
                     hyp_cfg: HypernetConfig, train_cfg: TrainConfig,
                     counts: list[int], seeds: tuple[int, ...] = (0, 1, 2),
                     k_shots: int = 10) -> list[dict]:
    """Full pipeline per base-class count against the dataset's fixed novel set.

    The base subset of size k is the k most frequent classes; training images
    are restricted to those whose annotations all fall inside the subset.
    """
    novel = list(dataset.novel_class_ids)
    for count in counts:
        if count > len(dataset.base_class_ids):
            raise ValueError(
                f"base count {count} exceeds available base classes ({len(dataset.base_class_ids)})")
        if count < 1:
            raise ValueError("base count must be >= 1")
    rows = []
    for count in counts:
        pool = dataset.base_class_ids[:count]
        ap_base, ap_novel, ap50_base, ap50_novel = [], [], [], []
        for seed in seeds:
            params, _ = pretrain(dataset, det_cfg, train_cfg, seed, class_pool=pool)
            meta_params, _ = meta_train(params, dataset, det_cfg, hyp_cfg, train_cfg,
                                        get_recipe("sylph"), seed, class_pool=pool)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
            book = generate_all_codes(dataset, meta_params, meta_params, det_cfg,
                                      hyp_cfg, k_shots, rng=rng,
                                      class_ids=pool + novel)
            report = evaluate(meta_params, det_cfg, book, dataset,
                              class_subset=pool + novel)
            base_vals = [report.per_class_ap[c] for c in pool if c in report.per_class_ap]
            base50_vals = [report.per_class_ap50[c] for c in pool if c in report.per_class_ap50]
            ap_base.append(float(np.mean(base_vals)) if base_vals else None)
            ap50_base.append(float(np.mean(base50_vals)) if base50_vals else None)
            ap_novel.append(report.ap_novel)
            ap50_novel.append(report.ap50_novel)
        med = lambda xs: float(np.median([x for x in xs if x is not None])) if any(
            x is not None for x in xs) else None
        rows.append({"base_count": count, "ap_base": med(ap_base),
                     "ap_novel": med(ap_novel), "ap50_base": med(ap50_base),
                     "ap50_novel": med(ap50_novel), "novel_class_ids": novel,
                     "seeds": list(seeds)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    header = ["base_count", "ap_base", "ap_novel", "ap50_base", "ap50_novel"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(
            [str(r["base_count"])]
            + [f"{r[k]:.4f}" if r[k] is not None else "" for k in header[1:]]))
    return "\n".join(lines) + "\n"
