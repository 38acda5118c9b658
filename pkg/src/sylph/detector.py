"""Anchor-free dense detector with a code-conditioned classifier.

Single stride-8 feature level: a small conv stem, two four-layer towers
(classification / box), a class-agnostic box head predicting (l,t,r,b)
distances through exp, a centerness head on the box tower, and a per-class
binary classifier whose parameters come entirely from the codebook. All
parameters live in a flat name->tensor dict whose keys double as the
checkpoint record names.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import ops
from .codes import ClassCode, CodeBook

Tensor = torch.Tensor
ParamDict = dict[str, Tensor]


@dataclass
class DetectorConfig:
    in_channels: int = 3
    stem_channels: tuple[int, ...] = (32, 64)
    channels: int = 64           # backbone output = tower width = code length
    tower_depth: int = 4
    gn_groups: int = 8
    stride: int = 8
    prior_prob: float = 0.01
    score_with_centerness: bool = True
    ltrb_clamp: float = 8.0      # exp input cap, only to keep floats finite


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def _conv_init(gen: torch.Generator, c_out: int, c_in: int, k: int,
               std: float | None = None) -> Tensor:
    w = torch.empty(c_out, c_in, k, k)
    if std is None:  # He init for conv+relu stacks
        std = (2.0 / (c_in * k * k)) ** 0.5
    return w.normal_(0.0, std, generator=gen)


def _block(params: ParamDict, prefix: str, gen: torch.Generator,
           c_in: int, c_out: int, head_std: float | None = None) -> None:
    params[f"{prefix}.weight"] = _conv_init(gen, c_out, c_in, 3, head_std)
    params[f"{prefix}.bias"] = torch.zeros(c_out)
    params[f"{prefix}.gn.weight"] = torch.ones(c_out)
    params[f"{prefix}.gn.bias"] = torch.zeros(c_out)


def init_detector_params(cfg: DetectorConfig, base_class_ids: list[int],
                         gen: torch.Generator) -> ParamDict:
    params: ParamDict = {}
    chans = [cfg.in_channels, *cfg.stem_channels, cfg.channels]
    for i in range(len(chans) - 1):
        _block(params, f"backbone.{i}", gen, chans[i], chans[i + 1])
    for tower in ("cls_tower", "box_tower"):
        for i in range(cfg.tower_depth):
            _block(params, f"{tower}.{i}", gen, cfg.channels, cfg.channels)
    params["box_head.weight"] = _conv_init(gen, 4, cfg.channels, 1, std=0.01)
    params["box_head.bias"] = torch.zeros(4)
    params["ctr_head.weight"] = _conv_init(gen, 1, cfg.channels, 1, std=0.01)
    params["ctr_head.bias"] = torch.zeros(1)
    b_p = ops.prior_bias(cfg.prior_prob)
    for cid in base_class_ids:
        params[f"codes.{cid}.weight"] = _conv_init(gen, 1, cfg.channels, 1, std=0.01).reshape(-1)
        params[f"codes.{cid}.bias"] = torch.full((), b_p)
    return params


def base_codebook(params: ParamDict) -> CodeBook:
    """Codebook view over the directly-trained base codes (shared tensors)."""
    cids = sorted({int(name.split(".")[1]) for name in params if name.startswith("codes.")})
    book = CodeBook()
    for cid in cids:
        book.add(cid, ClassCode(params[f"codes.{cid}.weight"],
                                params[f"codes.{cid}.bias"], provenance="pretrained"))
    return book


def _conv_gn_relu(params: ParamDict, prefix: str, x: Tensor, groups: int,
                  stride: int = 1) -> Tensor:
    x = ops.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"],
                   stride=stride, padding=1)
    x = ops.group_norm(x, groups, params[f"{prefix}.gn.weight"], params[f"{prefix}.gn.bias"])
    return ops.relu(x)


def extract_features(params: ParamDict, cfg: DetectorConfig, images: Tensor) -> Tensor:
    """Images [B,3,H,W] (H, W divisible by the stride) -> [B,C,H/8,W/8]."""
    if images.dim() != 4 or images.shape[1] != cfg.in_channels:
        raise ValueError(f"extract_features: expected [B,{cfg.in_channels},H,W], got {tuple(images.shape)}")
    h, w = images.shape[2], images.shape[3]
    if h % cfg.stride or w % cfg.stride:
        raise ValueError(f"extract_features: image size {h}x{w} not divisible by stride {cfg.stride}")
    x = images
    n_blocks = len(cfg.stem_channels) + 1
    for i in range(n_blocks):
        x = _conv_gn_relu(params, f"backbone.{i}", x, cfg.gn_groups, stride=2)
    return x


def run_tower(params: ParamDict, cfg: DetectorConfig, name: str, feat: Tensor) -> Tensor:
    x = feat
    for i in range(cfg.tower_depth):
        x = _conv_gn_relu(params, f"{name}.{i}", x, cfg.gn_groups)
    return x


def box_outputs(params: ParamDict, cfg: DetectorConfig, box_feat: Tensor) -> tuple[Tensor, Tensor]:
    """(ltrb distances in pixels [B,4,h,w], centerness logits [B,1,h,w])."""
    raw = ops.conv2d(box_feat, params["box_head.weight"], params["box_head.bias"])
    ltrb = torch.exp(raw.clamp(max=cfg.ltrb_clamp)) * cfg.stride
    ctr = ops.conv2d(box_feat, params["ctr_head.weight"], params["ctr_head.bias"])
    return ltrb, ctr


def conditional_classify(cls_feat: Tensor, codebook: CodeBook) -> Tensor:
    """Per-class 1x1 classification: logit_c(loc) = w_c . f(loc) + b_c.

    Classes are evaluated independently (one matvec per code), so the logit
    map of a class is bit-identical no matter what else is in the codebook.
    Output channel order is codebook insertion order.
    """
    b, c, h, w = cls_feat.shape
    flat = cls_feat.permute(0, 2, 3, 1).reshape(-1, c)
    maps = []
    for cid in codebook.class_ids:
        code = codebook.get(cid)
        if code.weight.numel() != c:
            raise ValueError(
                f"conditional_classify: code for class {cid} has dim {code.weight.numel()}, "
                f"features have {c} channels")
        maps.append(flat @ code.weight + code.bias)
    if not maps:
        return cls_feat.new_zeros(b, 0, h, w)
    return torch.stack(maps, dim=1).reshape(b, h, w, len(maps)).permute(0, 3, 1, 2)


def grid_locations(cfg: DetectorConfig, h: int, w: int) -> Tensor:
    """Stride-spaced location centers in image coordinates, [h*w, 2]."""
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) * cfg.stride
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) * cfg.stride
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)


def assign_targets(locations: Tensor, gt_boxes: Tensor, gt_classes: Tensor):
    """FCOS-style targets for one image.

    A location is positive iff strictly inside at least one box; ties go to
    the smallest-area box. Returns (labels [L] with class id or -1,
    ltrb [L,4], centerness [L]).
    """
    n_loc = locations.shape[0]
    labels = torch.full((n_loc,), -1, dtype=torch.int64)
    ltrb = torch.zeros(n_loc, 4)
    ctr = torch.zeros(n_loc)
    if gt_boxes.numel() == 0:
        return labels, ltrb, ctr
    xs = locations[:, 0:1]
    ys = locations[:, 1:2]
    left = xs - gt_boxes[None, :, 0]
    top = ys - gt_boxes[None, :, 1]
    right = gt_boxes[None, :, 2] - xs
    bottom = gt_boxes[None, :, 3] - ys
    dists = torch.stack([left, top, right, bottom], dim=2)  # [L, M, 4]
    inside = dists.min(dim=2).values > 0
    areas = ((gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1]))
    areas = areas[None, :].expand(n_loc, -1).clone()
    areas[~inside] = float("inf")
    best = areas.argmin(dim=1)
    positive = inside.any(dim=1)
    labels[positive] = gt_classes[best[positive]]
    chosen = dists[torch.arange(n_loc), best]
    ltrb[positive] = chosen[positive]
    l, t, r, b = chosen.unbind(dim=1)
    ratio = ((torch.minimum(l, r) / torch.maximum(l, r).clamp(min=1e-12))
             * (torch.minimum(t, b) / torch.maximum(t, b).clamp(min=1e-12)))
    ctr_all = torch.sqrt(ratio.clamp(min=0.0))
    ctr[positive] = ctr_all[positive]
    return labels, ltrb, ctr


def decode_boxes(locations: Tensor, ltrb: Tensor, image_size: tuple[int, int],
                 clip: bool = True) -> Tensor:
    """(x1,y1,x2,y2) from per-location distances, clipped to the image.

    The loss path decodes unclipped so boundary clamping cannot zero the
    regression gradient.
    """
    h, w = image_size
    x1 = locations[:, 0] - ltrb[:, 0]
    y1 = locations[:, 1] - ltrb[:, 1]
    x2 = locations[:, 0] + ltrb[:, 2]
    y2 = locations[:, 1] + ltrb[:, 3]
    if clip:
        x1 = x1.clamp(0, w)
        y1 = y1.clamp(0, h)
        x2 = x2.clamp(0, w)
        y2 = y2.clamp(0, h)
    return torch.stack([x1, y1, x2, y2], dim=1)


def detector_loss(cls_logits: Tensor, ltrb_pred: Tensor, ctr_logits: Tensor,
                  labels: Tensor, ltrb_target: Tensor, ctr_target: Tensor,
                  channel_of_class: dict[int, int], locations: Tensor,
                  image_size: tuple[int, int]) -> dict[str, Tensor]:
    """Focal classification over everything; IoU + centerness BCE on positives.

    Inputs are batched and flattened over locations: cls_logits [B,n,L],
    ltrb_pred [B,L,4], ctr_logits [B,L], labels [B,L], ltrb_target [B,L,4],
    ctr_target [B,L]. Total is the unit-weight sum of the three terms.
    """
    bsz, n_cls, n_loc = cls_logits.shape
    onehot = torch.zeros_like(cls_logits)
    pos_mask = torch.zeros(bsz, n_loc, dtype=torch.bool)
    for cid, chan in channel_of_class.items():
        sel = labels == cid
        onehot[:, chan, :][sel] = 1.0
        pos_mask |= sel
    cls = ops.focal_loss(cls_logits, onehot)
    if pos_mask.any():
        loc_pos = locations[None, :, :].expand(bsz, -1, -1)[pos_mask]
        pred_boxes = decode_boxes(loc_pos, ltrb_pred[pos_mask], image_size, clip=False)
        gt_boxes = decode_boxes(loc_pos, ltrb_target[pos_mask], image_size, clip=False)
        box = (1.0 - ops.iou(pred_boxes, gt_boxes)).mean()
        ctr = torch.nn.functional.binary_cross_entropy_with_logits(
            ctr_logits[pos_mask], ctr_target[pos_mask])
    else:
        box = cls_logits.new_zeros(())
        ctr = cls_logits.new_zeros(())
    return {"cls": cls, "box": box, "ctr": ctr, "total": cls + box + ctr}


def nms(boxes: Tensor, scores: Tensor, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, score-ordered."""
    n = boxes.shape[0]
    if n == 0:
        return []
    order = torch.argsort(scores, descending=True)
    mat = ops.iou_matrix(boxes, boxes) > iou_thresh
    suppressed = torch.zeros(n, dtype=torch.bool)
    keep: list[int] = []
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= mat[i]
    return keep


def forward_batch(params: ParamDict, cfg: DetectorConfig, codebook: CodeBook,
                  images: Tensor) -> dict[str, Tensor]:
    """Full forward over [B,3,H,W] images."""
    feat = extract_features(params, cfg, images)
    cls_feat = run_tower(params, cfg, "cls_tower", feat)
    box_feat = run_tower(params, cfg, "box_tower", feat)
    ltrb, ctr = box_outputs(params, cfg, box_feat)
    logits = conditional_classify(cls_feat, codebook)
    return {"cls_logits": logits, "ltrb": ltrb, "ctr": ctr}


def forward_single(params: ParamDict, cfg: DetectorConfig, codebook: CodeBook,
                   image: Tensor) -> dict[str, Tensor]:
    """Full forward over one [3,H,W] image."""
    out = forward_batch(params, cfg, codebook, image[None])
    return {k: v[0] for k, v in out.items()}


def decode_per_class(cls_logits: Tensor, ltrb: Tensor, ctr_logits: Tensor,
                     cfg: DetectorConfig, class_ids: list[int],
                     image_size: tuple[int, int], score_thresh: float = 0.05,
                     nms_iou: float = 0.6) -> dict[int, list[Detection]]:
    """Threshold + per-class NMS; no cross-class interaction, no global cap.

    cls_logits [n,h,w], ltrb [4,h,w], ctr_logits [1,h,w] for one image.
    """
    n, h, w = cls_logits.shape
    locations = grid_locations(cfg, h, w)
    boxes = decode_boxes(locations, ltrb.reshape(4, -1).T, image_size)
    p_ctr = torch.sigmoid(ctr_logits.reshape(-1))
    out: dict[int, list[Detection]] = {}
    for chan, cid in enumerate(class_ids):
        p_cls = torch.sigmoid(cls_logits[chan].reshape(-1))
        score = torch.sqrt(p_cls * p_ctr) if cfg.score_with_centerness else p_cls
        keep = score >= score_thresh
        if not bool(keep.any()):
            out[cid] = []
            continue
        cand_boxes = boxes[keep]
        cand_scores = score[keep]
        kept = nms(cand_boxes, cand_scores, nms_iou)
        out[cid] = [Detection(tuple(float(v) for v in cand_boxes[i]), cid,
                              float(cand_scores[i])) for i in kept]
    return out


def decode_and_nms(cls_logits: Tensor, ltrb: Tensor, ctr_logits: Tensor,
                   cfg: DetectorConfig, class_ids: list[int],
                   image_size: tuple[int, int], score_thresh: float = 0.05,
                   nms_iou: float = 0.6, max_dets: int = 100) -> list[Detection]:
    """Per-class survivors merged and capped to the max_dets highest scores."""
    per_class = decode_per_class(cls_logits, ltrb, ctr_logits, cfg, class_ids,
                                 image_size, score_thresh, nms_iou)
    merged = [d for dets in per_class.values() for d in dets]
    merged.sort(key=lambda d: -d.score)
    return merged[:max_dets]


def detect(params: ParamDict, cfg: DetectorConfig, codebook: CodeBook,
           image: Tensor, score_thresh: float = 0.05, nms_iou: float = 0.6,
           max_dets: int = 100) -> list[Detection]:
    h, w = image.shape[1], image.shape[2]
    with torch.no_grad():
        out = forward_single(params, cfg, codebook, image)
    return decode_and_nms(out["cls_logits"], out["ltrb"], out["ctr"], cfg,
                          codebook.class_ids, (h, w), score_thresh, nms_iou, max_dets)
