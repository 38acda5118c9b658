"""Differentiable tensor operations shared by the detector and the code generator.

Everything operates on plain torch tensors (float32 during training, float64
under gradient checking) and runs deterministically on CPU. Ops validate their
contracts eagerly and raise ``ValueError`` with a diagnostic naming the
offending dimension, so shape bugs surface at the call site rather than deep
inside a kernel.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


def prior_bias(prior_prob: float = 0.01) -> float:
    """Classifier bias that makes sigmoid output ~= prior_prob at init."""
    return -math.log((1.0 - prior_prob) / prior_prob)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square kernel.

    Output spatial extent is (H + 2*padding - k) // stride + 1.
    """
    if x.dim() != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got {tuple(x.shape)}")
    if kernel.dim() != 4:
        raise ValueError(f"conv2d: kernel must be 4-D (Cout,Cin,k,k), got {tuple(kernel.shape)}")
    if kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d: kernel must be square, got {kernel.shape[2]}x{kernel.shape[3]}")
    if kernel.shape[2] < 1:
        raise ValueError(f"conv2d: kernel size must be >= 1, got {kernel.shape[2]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels (dim 1) but kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(
            f"conv2d: bias shape {tuple(bias.shape)} does not match Cout={kernel.shape[0]}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) slices, per-channel affine."""
    if x.dim() != 4:
        raise ValueError(f"group_norm: input must be 4-D (N,C,H,W), got {tuple(x.shape)}")
    c = x.shape[1]
    if groups < 1 or c % groups != 0:
        raise ValueError(f"group_norm: C={c} not divisible by groups={groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"group_norm: affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} must be ({c},)")
    if eps <= 0:
        raise ValueError(f"group_norm: eps must be > 0, got {eps}")
    return F.group_norm(x, groups, gamma, beta, eps)


def relu(x: Tensor) -> Tensor:
    """ReLU; gradient at exactly 0 is 0."""
    return F.relu(x)


def l2_normalize(w: Tensor, eps: float = 1e-12) -> Tensor:
    """w / max(||w||_2, eps) over all elements. Zero vectors pass through."""
    if eps <= 0:
        raise ValueError(f"l2_normalize: eps must be > 0, got {eps}")
    norm = torch.linalg.vector_norm(w)
    return w / torch.clamp(norm, min=eps)


def focal_loss(logits: Tensor, targets: Tensor, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Binary focal loss, summed and divided by max(#positive locations, 1).

    targets must be exactly 0 or 1. Computed through logsigmoid so saturated
    logits stay finite.
    """
    if logits.shape != targets.shape:
        raise ValueError(
            f"focal_loss: logits shape {tuple(logits.shape)} != targets shape {tuple(targets.shape)}")
    is_binary = ((targets == 0) | (targets == 1)).all()
    if not bool(is_binary):
        bad = targets[(targets != 0) & (targets != 1)].flatten()[0].item()
        raise ValueError(f"focal_loss: targets must be binary, found value {bad}")
    log_p = F.logsigmoid(logits)
    log_not_p = F.logsigmoid(-logits)
    pos = targets == 1
    # -alpha * (1-p)^gamma * log(p) on positives, -(1-alpha) * p^gamma * log(1-p) on negatives
    loss_pos = -alpha * torch.exp(gamma * log_not_p) * log_p
    loss_neg = -(1.0 - alpha) * torch.exp(gamma * log_p) * log_not_p
    loss = torch.where(pos, loss_pos, loss_neg)
    n_pos = pos.sum().clamp(min=1).to(loss.dtype)
    return loss.sum() / n_pos


def iou(box_a: Tensor, box_b: Tensor) -> Tensor:
    """Elementwise IoU of (x1,y1,x2,y2) boxes; broadcasts over leading dims.

    Degenerate (zero-area) pairs give 0, not an error. Differentiable, so it
    doubles as the box regression loss term (1 - iou).
    """
    if not torch.is_tensor(box_a):
        box_a = torch.tensor(box_a, dtype=torch.float32)
    if not torch.is_tensor(box_b):
        box_b = torch.tensor(box_b, dtype=box_a.dtype)
    ix1 = torch.maximum(box_a[..., 0], box_b[..., 0])
    iy1 = torch.maximum(box_a[..., 1], box_b[..., 1])
    ix2 = torch.minimum(box_a[..., 2], box_b[..., 2])
    iy2 = torch.minimum(box_a[..., 3], box_b[..., 3])
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)
    area_a = (box_a[..., 2] - box_a[..., 0]) * (box_a[..., 3] - box_a[..., 1])
    area_b = (box_b[..., 2] - box_b[..., 0]) * (box_b[..., 3] - box_b[..., 1])
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


def iou_matrix(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """Pairwise IoU, [N,4] x [M,4] -> [N,M]."""
    return iou(boxes_a[:, None, :], boxes_b[None, :, :])


def bilinear_sample(feat: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Bilinear interpolation of feat [C,H,W] at continuous points -> [C, n].

    Coordinates are in grid units: x = i lands exactly on column i. Samples
    outside the grid contribute zero (points more than one cell outside the
    border read as all-zero).
    """
    c, h, w = feat.shape
    xs = xs.reshape(-1)
    ys = ys.reshape(-1)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    wx1 = xs - x0
    wy1 = ys - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    out = feat.new_zeros(c, xs.numel())
    for dy, wy in ((0, wy0), (1, wy1)):
        iy = y0.long() + dy
        valid_y = (iy >= 0) & (iy < h)
        for dx, wx in ((0, wx0), (1, wx1)):
            ix = x0.long() + dx
            valid = valid_y & (ix >= 0) & (ix < w)
            weight = (wx * wy) * valid.to(wx.dtype)
            gathered = feat[:, iy.clamp(0, h - 1), ix.clamp(0, w - 1)]
            out = out + gathered * weight[None, :]
    return out


def bilinear_sample_point(feat: Tensor, point: tuple[float, float]) -> Tensor:
    """Single-point convenience wrapper around bilinear_sample -> [C]."""
    x, y = point
    xs = feat.new_tensor([float(x)])
    ys = feat.new_tensor([float(y)])
    return bilinear_sample(feat, xs, ys)[:, 0]


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, [N,C,H,W] -> [N,C]."""
    if x.dim() != 4:
        raise ValueError(f"global_avg_pool: input must be 4-D, got {tuple(x.shape)}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool: empty spatial extent {tuple(x.shape)}")
    return x.mean(dim=(2, 3))
