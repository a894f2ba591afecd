"""Rendering-consistency losses on depth and semantic maps.

All losses take rendered maps plus supervision targets with validity masks
and return both the scalar value and exact gradients with respect to the
rendered maps.  Invalid pixels contribute nothing to either.

Group structure: camera views are pooled into one mean over all valid camera
pixels, top-down views form a second mean, and the two means are summed.  A
group with no valid pixels contributes zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS_W = 1e-12


def smooth_l1(x, transition: float = 1.0):
    """Huber-style penalty: 0.5 x^2 / transition inside, |x| - transition/2 outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < transition, 0.5 * x * x / transition, ax - 0.5 * transition)


def smooth_l1_grad(x, transition: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < transition, x / transition, np.sign(x))


def cross_entropy(logits, labels):
    """Per-item softmax cross entropy and its gradient.

    ``logits`` is (N, K), ``labels`` (N,) integer.  Returns ``(loss, grad)``
    where loss is (N,) and grad is (N, K) = softmax(logits) - onehot(labels).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[..., 0]
    n = logits.shape[0]
    loss = lse - logits[np.arange(n), labels]
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad


def jaccard_extension_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard set loss along a sorted error order.

    ``gt_sorted`` is the 0/1 ground-truth indicator permuted by decreasing
    error.  Entry i is the increase of (1 - intersection/union) when the
    prefix of mispredicted pixels grows from i to i+1.
    """
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, mask=None):
    """Lovasz extension of the Jaccard loss over softmax probabilities.

    ``probs`` is (N, K) rows summing to 1, ``labels`` (N,) integers, ``mask``
    an optional (N,) validity filter.  For every class present among the
    masked labels the per-pixel errors are sorted by decreasing magnitude and
    dotted with the Jaccard gradient; classes are then averaged.  Returns
    ``(loss, grad)`` with grad (N, K) with respect to the probabilities
    (zero rows at masked-out pixels).  An empty mask yields (0, zeros).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = probs.shape
    grad = np.zeros_like(probs)
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    sel = np.flatnonzero(mask)
    if sel.size == 0:
        return 0.0, grad
    p = probs[sel]
    y = labels[sel]
    present = np.unique(y)
    total = 0.0
    for c in present:
        fg = (y == c).astype(np.float64)
        errors = np.where(fg > 0, 1.0 - p[:, c], p[:, c])
        order = np.argsort(-errors, kind="stable")
        g = jaccard_extension_grad(fg[order])
        total += float(errors[order] @ g)
        # d(loss_c)/d errors_sorted = g; map back through the permutation
        derr = np.zeros(sel.size)
        derr[order] = g
        grad[sel, c] += np.where(fg > 0, -derr, derr)
    m = float(len(present))
    return total / m, grad / m


@dataclass
class LossWeights:
    """Scalar weights for the regulator total; both default to 1."""

    depth: float = 1.0
    semantic: float = 1.0


@dataclass
class SupervisionMaps:
    """Targets plus validity masks for one rig of camera views and one
    top-down view.  Camera entries are parallel lists; any group may be
    empty or None when that supervision is disabled."""

    cam_depth: list = field(default_factory=list)  # (H, W) float
    cam_class: list = field(default_factory=list)  # (H, W) int
    cam_mask: list = field(default_factory=list)  # (H, W) bool
    bev_height: np.ndarray | None = None
    bev_class: np.ndarray | None = None
    bev_mask: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.cam_depth) == len(self.cam_class) == len(self.cam_mask)):
            raise ValueError("camera target lists must have equal length")


def _masked_scalar_group(preds, targets, masks, transition):
    """Pooled smooth-l1 mean over every valid pixel of a view group."""
    grads = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in preds]
    n_valid = sum(int(np.count_nonzero(m)) for m in masks)
    if n_valid == 0:
        return 0.0, grads
    total = 0.0
    for g, p, t, m in zip(grads, preds, targets, masks):
        diff = np.where(m, np.asarray(p, dtype=np.float64) - t, 0.0)
        total += smooth_l1(diff, transition)[m].sum()
        g[m] = smooth_l1_grad(diff, transition)[m] / n_valid
    return total / n_valid, grads


def depth_loss(cam_pred, bev_pred, sup: SupervisionMaps, transition: float = 1.0):
    """Depth consistency: pooled camera mean plus top-down mean.

    ``cam_pred`` is a list of rendered (H, W) depth maps aligned with
    ``sup.cam_depth``; ``bev_pred`` the rendered height map or None.
    Returns ``(total, cam_part, bev_part, cam_grads, bev_grad)``.
    """
    if len(cam_pred) != len(sup.cam_depth):
        raise ValueError("camera prediction count must match supervision")
    cam_part, cam_grads = _masked_scalar_group(
        cam_pred, sup.cam_depth, sup.cam_mask, transition
    )
    bev_part, bev_grad = 0.0, None
    if bev_pred is not None and sup.bev_height is not None:
        bev_part, (bev_grad,) = _masked_scalar_group(
            [bev_pred], [sup.bev_height], [sup.bev_mask], transition
        )
    elif bev_pred is not None:
        bev_grad = np.zeros_like(np.asarray(bev_pred, dtype=np.float64))
    return cam_part + bev_part, cam_part, bev_part, cam_grads, bev_grad


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def _semantic_group(logit_maps, weight_maps, labels, masks, renormalize):
    """Cross entropy mean plus Lovasz over the pooled valid pixels of a group.

    Returns (value, [dL/dlogits per map], [dL/dweight_sum per map]).
    """
    grads = [np.zeros_like(np.asarray(s, dtype=np.float64)) for s in logit_maps]
    wgrads = [
        np.zeros(np.asarray(s, dtype=np.float64).shape[:-1]) for s in logit_maps
    ]
    chunks = []  # (map index, flat pixel indices, scaled logits, labels, wc, unclamped)
    for i, (s, y, m) in enumerate(zip(logit_maps, labels, masks)):
        s = np.asarray(s, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        idx = np.flatnonzero(m.ravel())
        if idx.size == 0:
            continue
        sel = s.reshape(-1, s.shape[-1])[idx]
        wc = unclamped = None
        if renormalize:
            w = np.asarray(weight_maps[i], dtype=np.float64).ravel()[idx]
            wc = np.maximum(w, _EPS_W)
            unclamped = w >= _EPS_W
            sel = sel / wc[:, None]
        chunks.append((i, idx, sel, np.asarray(y).ravel()[idx], wc, unclamped))
    if not chunks:
        return 0.0, grads, wgrads
    logits = np.concatenate([c[2] for c in chunks])
    labs = np.concatenate([c[3] for c in chunks])
    n = logits.shape[0]

    ce, ce_grad = cross_entropy(logits, labs)
    probs = _softmax(logits)
    ls, ls_grad_p = lovasz_softmax(probs, labs)
    # chain the Lovasz probability gradient through the softmax
    dot = (ls_grad_p * probs).sum(axis=1, keepdims=True)
    ls_grad = probs * (ls_grad_p - dot)
    value = float(ce.mean()) + ls
    dlogits = ce_grad / n + ls_grad

    pos = 0
    for i, idx, sel, _, wc, unclamped in chunks:
        m = idx.size
        d = dlogits[pos : pos + m]
        if renormalize:
            # sel already holds the scaled logits s / wc
            dw = -(d * sel).sum(axis=1) / wc
            wgrads[i].reshape(-1)[idx] = np.where(unclamped, dw, 0.0)
            d = d / wc[:, None]
        grads[i].reshape(-1, grads[i].shape[-1])[idx] = d
        pos += m
    return value, grads, wgrads


def semantic_loss(
    cam_logits,
    bev_logits,
    sup: SupervisionMaps,
    cam_weight_sums=None,
    bev_weight_sum=None,
    renormalize: bool = False,
):
    """Semantic consistency: (cross entropy + Lovasz) per view group.

    Rendered semantic accumulations are treated as logits and softmaxed as
    they are.  With ``renormalize`` they are first divided by the clamped
    per-pixel weight sum, and gradients with respect to those weight sums are
    returned as well.  Returns ``(total, cam_part, bev_part, cam_grads,
    bev_grad, cam_wgrads, bev_wgrad)``.
    """
    if renormalize and cam_weight_sums is None and len(cam_logits) > 0:
        raise ValueError("renormalize requires the rendered weight sums")
    cam_part, cam_grads, cam_wgrads = _semantic_group(
        cam_logits,
        cam_weight_sums if cam_weight_sums is not None else [None] * len(cam_logits),
        sup.cam_class,
        sup.cam_mask,
        renormalize,
    )
    bev_part, bev_grad, bev_wgrad = 0.0, None, None
    if bev_logits is not None and sup.bev_class is not None:
        bev_part, (bev_grad,), (bev_wgrad,) = _semantic_group(
            [bev_logits], [bev_weight_sum], [sup.bev_class], [sup.bev_mask],
            renormalize,
        )
    elif bev_logits is not None:
        bev_grad = np.zeros_like(np.asarray(bev_logits, dtype=np.float64))
        bev_wgrad = np.zeros(bev_grad.shape[:-1])
    return (
        cam_part + bev_part,
        cam_part,
        bev_part,
        cam_grads,
        bev_grad,
        cam_wgrads if renormalize else None,
        bev_wgrad if renormalize else None,
    )


@dataclass
class RegulatorLossResult:
    total: float
    parts: dict
    cam_depth_grads: list
    bev_depth_grad: np.ndarray | None
    cam_sem_grads: list
    bev_sem_grad: np.ndarray | None
    cam_weight_grads: list | None
    bev_weight_grad: np.ndarray | None


def regulator_loss(
    cam_depth_pred,
    cam_sem_pred,
    bev_depth_pred,
    bev_sem_pred,
    sup: SupervisionMaps,
    weights: LossWeights | None = None,
    transition: float = 1.0,
    use_depth: bool = True,
    use_semantic: bool = True,
    cam_weight_sums=None,
    bev_weight_sum=None,
    renormalize: bool = False,
) -> RegulatorLossResult:
    """Weighted sum of the depth and semantic consistency losses.

    Gradients of disabled terms are zero; the parts dict always carries the
    per-view-group components for logging.
    """
    weights = weights or LossWeights()
    zs = [np.zeros_like(np.asarray(d, dtype=np.float64)) for d in cam_depth_pred]
    parts = {"dep_cam": 0.0, "dep_bev": 0.0, "sem_cam": 0.0, "sem_bev": 0.0}
    cam_d_grads = list(zs)
    bev_d_grad = (
        np.zeros_like(np.asarray(bev_depth_pred, dtype=np.float64))
        if bev_depth_pred is not None
        else None
    )
    cam_s_grads = [np.zeros_like(np.asarray(s, dtype=np.float64)) for s in cam_sem_pred]
    bev_s_grad = (
        np.zeros_like(np.asarray(bev_sem_pred, dtype=np.float64))
        if bev_sem_pred is not None
        else None
    )
    cam_w_grads = None
    bev_w_grad = None

    total = 0.0
    if use_depth:
        dep, dep_cam, dep_bev, cam_d_grads, bev_d_grad = depth_loss(
            cam_depth_pred, bev_depth_pred, sup, transition
        )
        for g in cam_d_grads:
            g *= weights.depth
        if bev_d_grad is not None:
            bev_d_grad *= weights.depth
        total += weights.depth * dep
        parts["dep_cam"], parts["dep_bev"] = dep_cam, dep_bev
    if use_semantic:
        sem, sem_cam, sem_bev, cam_s_grads, bev_s_grad, cam_w_grads, bev_w_grad = (
            semantic_loss(
                cam_sem_pred,
                bev_sem_pred,
                sup,
                cam_weight_sums,
                bev_weight_sum,
                renormalize,
            )
        )
        for g in cam_s_grads:
            g *= weights.semantic
        if bev_s_grad is not None:
            bev_s_grad *= weights.semantic
        if cam_w_grads is not None:
            for g in cam_w_grads:
                g *= weights.semantic
        if bev_w_grad is not None:
            bev_w_grad *= weights.semantic
        total += weights.semantic * sem
        parts["sem_cam"], parts["sem_bev"] = sem_cam, sem_bev

    return RegulatorLossResult(
        total=total,
        parts=parts,
        cam_depth_grads=cam_d_grads,
        bev_depth_grad=bev_d_grad,
        cam_sem_grads=cam_s_grads,
        bev_sem_grad=bev_s_grad,
        cam_weight_grads=cam_w_grads,
        bev_weight_grad=bev_w_grad,
    )
