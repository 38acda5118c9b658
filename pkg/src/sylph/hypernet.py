"""Few-shot hypernetwork: support features -> per-class classifier codes.

Pipeline per class: the shared detector backbone embeds each support image,
ROI alignment crops a fixed 7x7 feature patch per (image, box) shot, the code
predictor head maps each patch to a raw weight vector and bias, and the code
process module averages over shots, L2-normalizes the weight onto a sphere of
radius |g|, and composes the bias with the focal prior. Enrolling a class is a
pure feed-forward pass: no parameter of the detector or the hypernetwork
changes, which is what makes sequential enrollment interference-free.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import ops
from .codes import ClassCode, CodeBook
from .detector import DetectorConfig, ParamDict, extract_features

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass
class HypernetConfig:
    feature_channels: int = 64   # d_f, backbone output channels
    code_channels: int = 64      # C, classifier weight length
    n_shared_convs: int = 2      # 0, 1 or 2
    gn_groups: int = 8
    roi_size: int = 7
    sampling_ratio: int = 2      # bilinear samples per bin edge
    prior_prob: float = 0.01
    l2_eps: float = 1e-12
    use_bias: bool = True        # predict the bias (else fixed focal prior)
    use_gn: bool = True          # group-normalize the weight-prediction map
    use_l2: bool = True          # L2-normalize the aggregated weight
    use_g: bool = True           # learnable rescale of the weight

def init_hypernet_params(cfg: HypernetConfig, gen: torch.Generator) -> ParamDict:
    params: ParamDict = {}
    d = cfg.feature_channels
    for i in range(cfg.n_shared_convs):
        w = torch.empty(d, d, 3, 3).normal_(0.0, (2.0 / (d * 9)) ** 0.5, generator=gen)
        params[f"hypernet.shared.{i}.weight"] = w
        params[f"hypernet.shared.{i}.bias"] = torch.zeros(d)
        params[f"hypernet.shared.{i}.gn.weight"] = torch.ones(d)
        params[f"hypernet.shared.{i}.gn.bias"] = torch.zeros(d)
    params["hypernet.weight_head.weight"] = torch.empty(
        cfg.code_channels, d, 3, 3).normal_(0.0, 0.01, generator=gen)
    params["hypernet.weight_head.bias"] = torch.zeros(cfg.code_channels)
    params["hypernet.bias_head.weight"] = torch.empty(1, d, 3, 3).normal_(0.0, 0.01, generator=gen)
    params["hypernet.bias_head.bias"] = torch.zeros(1)
    params["hypernet.g"] = torch.ones(())
    params["hypernet.g_b"] = torch.ones(())
    return params


def hypernet_param_names(cfg: HypernetConfig) -> list[str]:
    gen = torch.Generator().manual_seed(0)
    return list(init_hypernet_params(cfg, gen))


def roi_align(features: Tensor, box, output_size: int = 7, sampling_ratio: int = 2,
              spatial_scale: float = 1.0 / 8.0) -> Tensor:
    """Aligned ROI pooling of features [C,H,W] for one box in image coords.

    The box is scaled to feature coordinates and shifted by half a cell
    (aligned corners); every output bin averages sampling_ratio^2 bilinear
    samples placed at regular offsets inside the bin. Boxes smaller than one
    feature cell are fine: bilinear interpolation handles sub-cell extents.
    """
    if features.dim() != 3:
        raise ValueError(f"roi_align: features must be [C,H,W], got {tuple(features.shape)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 >= x1 and y2 >= y1):
        raise ValueError(f"roi_align: invalid box {box}")
    fx1 = x1 * spatial_scale - 0.5
    fy1 = y1 * spatial_scale - 0.5
    fx2 = x2 * spatial_scale - 0.5
    fy2 = y2 * spatial_scale - 0.5
    bin_w = (fx2 - fx1) / output_size
    bin_h = (fy2 - fy1) / output_size
    s = sampling_ratio
    offsets = (torch.arange(s, dtype=features.dtype) + 0.5) / s
    # sample coordinates: [output_size, s] per axis, flattened row-major
    xs = fx1 + (torch.arange(output_size, dtype=features.dtype)[:, None] + offsets[None, :]) * bin_w
    ys = fy1 + (torch.arange(output_size, dtype=features.dtype)[:, None] + offsets[None, :]) * bin_h
    grid_x = xs.reshape(-1)[None, :].expand(output_size * s, -1).reshape(-1)
    grid_y = ys.reshape(-1)[:, None].expand(-1, output_size * s).reshape(-1)
    samples = ops.bilinear_sample(features, grid_x, grid_y)  # [C, (o*s)^2]
    c = features.shape[0]
    samples = samples.reshape(c, output_size, s, output_size, s)
    return samples.mean(dim=(2, 4))


def cph_forward(params: ParamDict, cfg: HypernetConfig, z: Tensor) -> tuple[Tensor, Tensor]:
    """Code predictor head over a batch of ROI patches [K, d_f, r, r].

    Returns per-shot raw weights [K, C] and biases [K]: shared 3x3 convs with
    group norm + ReLU, parallel weight/bias prediction convs, then global
    average pooling collapses the spatial extent.
    """
    if z.dim() == 3:
        z = z[None]
    x = z
    for i in range(cfg.n_shared_convs):
        x = ops.conv2d(x, params[f"hypernet.shared.{i}.weight"],
                       params[f"hypernet.shared.{i}.bias"], padding=1)
        x = ops.group_norm(x, cfg.gn_groups, params[f"hypernet.shared.{i}.gn.weight"],
                           params[f"hypernet.shared.{i}.gn.bias"])
        x = ops.relu(x)
    w_map = ops.conv2d(x, params["hypernet.weight_head.weight"],
                       params["hypernet.weight_head.bias"], padding=1)
    if cfg.use_gn:
        # parameter-free normalization of the prediction map, the group-norm
        # flavor of code normalization (the bias path stays raw: normalizing
        # a scalar prediction would erase it)
        ones = w_map.new_ones(w_map.shape[1])
        zeros = w_map.new_zeros(w_map.shape[1])
        w_map = ops.group_norm(w_map, cfg.gn_groups, ones, zeros)
    b_map = ops.conv2d(x, params["hypernet.bias_head.weight"],
                       params["hypernet.bias_head.bias"], padding=1)
    w_raw = ops.global_avg_pool(w_map)
    b_raw = ops.global_avg_pool(b_map)[:, 0]
    return w_raw, b_raw


def cpm_aggregate(w_raw: Tensor, b_raw: Tensor, params: ParamDict,
                  cfg: HypernetConfig) -> ClassCode:
    """Shots -> one code: mean, optional L2-normalize + rescale, bias compose.

    w* = g * w_mean / ||w_mean||   (with use_l2 and use_g)
    b* = g_b * b_mean + b_p        (with use_bias; b_p = -log((1-pi)/pi))
    """
    if w_raw.dim() != 2 or w_raw.shape[0] < 1:
        raise ValueError(f"cpm_aggregate: need [K, C] per-shot weights, got {tuple(w_raw.shape)}")
    w = w_raw.mean(dim=0)
    b = b_raw.mean()
    if cfg.use_l2:
        w = ops.l2_normalize(w, eps=cfg.l2_eps)
    if cfg.use_g:
        w = params["hypernet.g"] * w
    b_p = w.new_tensor(ops.prior_bias(cfg.prior_prob))
    if cfg.use_bias:
        b_star = params["hypernet.g_b"] * b + b_p
    else:
        b_star = b_p
    return ClassCode(weight=w, bias=b_star, provenance="hypernet")


def synthesize_code(det_params: ParamDict, hyp_params: ParamDict,
                    det_cfg: DetectorConfig, hyp_cfg: HypernetConfig,
                    support_images: Tensor, support_boxes: list) -> ClassCode:
    """Full support pass for one class; keeps autograd edges when params do.

    support_images [K,3,H,W] with one box (image coords) per image.
    """
    if support_images.shape[0] == 0:
        raise ValueError("synthesize_code: empty support set")
    feats = extract_features(det_params, det_cfg, support_images)
    patches = torch.stack([
        roi_align(feats[i], support_boxes[i], output_size=hyp_cfg.roi_size,
                  sampling_ratio=hyp_cfg.sampling_ratio,
                  spatial_scale=1.0 / det_cfg.stride)
        for i in range(support_images.shape[0])])
    w_raw, b_raw = cph_forward(hyp_params, hyp_cfg, patches)
    return cpm_aggregate(w_raw, b_raw, hyp_params, hyp_cfg)


def enroll(class_id: int, support: list, det_params: ParamDict, hyp_params: ParamDict,
           det_cfg: DetectorConfig, hyp_cfg: HypernetConfig, codebook: CodeBook,
           to_tensor, overwrite: bool = False) -> ClassCode:
    """Enroll one class from (image, box) shots; pure read of all parameters.

    `to_tensor` converts a stored image (uint8 HWC) to a [3,H,W] float tensor.
    """
    if not support:
        raise ValueError(f"enroll: empty support set for class {class_id}")
    if class_id in codebook and not overwrite:
        raise ValueError(f"enroll: class {class_id} already enrolled")
    images = torch.stack([to_tensor(img) for img, _ in support])
    boxes = [box for _, box in support]
    with torch.no_grad():
        code = synthesize_code(det_params, hyp_params, det_cfg, hyp_cfg, images, boxes)
    code = code.detached()
    codebook.add(class_id, code, overwrite=overwrite)
    return code


def generate_all_codes(dataset, det_params: ParamDict, hyp_params: ParamDict | None,
                       det_cfg: DetectorConfig, hyp_cfg: HypernetConfig | None,
                       k_shots: int, mode: str = "hypernet",
                       class_ids: list[int] | None = None,
                       rng: np.random.Generator | None = None,
                       split: str = "train", into: CodeBook | None = None) -> CodeBook:
    """Enroll every requested class, one at a time.

    hypernet mode samples min(k, available) support instances per class from
    the split; pretrained mode copies the directly-trained base codes.
    Classes without a single instance are skipped with a warning. Passing
    `into` extends an existing codebook instead of starting a fresh one.
    """
    if mode not in ("hypernet", "pretrained"):
        raise ValueError(f"generate_all_codes: unknown mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    if class_ids is None:
        class_ids = list(dataset.class_ids)
    book = CodeBook() if into is None else into
    for cid in class_ids:
        if mode == "pretrained":
            wname, bname = f"codes.{cid}.weight", f"codes.{cid}.bias"
            if wname not in det_params:
                raise ValueError(f"generate_all_codes: no pretrained code for class {cid}")
            book.add(cid, ClassCode(det_params[wname].detach().clone(),
                                    det_params[bname].detach().clone(), "pretrained"))
            continue
        instances = dataset.instances(split, cid)
        if not instances:
            logger.warning("class %d has no instances in split %r; skipped", cid, split)
            continue
        n = min(k_shots, len(instances))
        picks = rng.choice(len(instances), size=n, replace=False)
        support = [(dataset.image(split, instances[i][0]), instances[i][1]) for i in picks]
        enroll(cid, support, det_params, hyp_params, det_cfg, hyp_cfg, book,
               to_tensor=dataset.to_tensor)
    return book
