"""Supervised contrastive losses over sentiment labels, cross-entropy, and their sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

TWO_STEP_MODES = ("two-step", "no-intra", "no-inter", "no-cmf", "ce-only")
MODES = ("one-step",) + TWO_STEP_MODES


def build_intra_mask(labels) -> np.ndarray:
    """Entry (i, j) is 1 iff labels match and i != j."""
    y = np.asarray(labels).reshape(-1)
    mask = (y[:, None] == y[None, :]).astype(np.float32)
    np.fill_diagonal(mask, 0.0)
    return mask


def build_inter_mask(labels, include_diagonal: bool = False) -> np.ndarray:
    """Same-label image/text positives; the matched pair is excluded unless asked."""
    mask = build_intra_mask(labels)
    if include_diagonal:
        np.fill_diagonal(mask, 1.0)
    return mask


def cosine_sim_matrix(a: Tensor, c: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[1:] != c.shape[1:] or c.ndim != 2:
        raise ShapeError(f"cosine_sim_matrix: shapes {a.shape} and {c.shape} do not match")
    return ag.matmul(ag.l2_normalize(a, axis=1), ag.transpose(ag.l2_normalize(c, axis=1)))


def _check_batch(z: Tensor, labels, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    y = np.asarray(labels).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.size:
        raise ShapeError(f"embeddings {z.shape} do not match {y.size} labels")
    if y.size < 2:
        raise ValueError("contrastive losses need a batch of at least 2")
    return y


def _masked_contrastive(sim: Tensor, positives: np.ndarray, denom_mask: np.ndarray,
                        tau: float) -> Tensor:
    """-(1/B^2) sum_ij pos_ij * log(exp(s_ij/tau) / sum_k denom_ik exp(s_ik/tau))."""
    b = sim.shape[0]
    logits = ag.div(sim, tau)
    # constant shift per row; cancels inside the ratio
    shift = np.where(denom_mask > 0, logits.data, -np.inf).max(axis=1, keepdims=True)
    shifted = ag.sub(logits, shift.astype(logits.dtype))
    denom = ag.sum(ag.mul(ag.exp(shifted), denom_mask.astype(logits.dtype)), axis=1, keepdims=True)
    log_prob = ag.sub(shifted, ag.log(denom))
    return ag.div(ag.sum(ag.mul(log_prob, positives.astype(logits.dtype))), -float(b * b))


def supcon_intra_loss(z: Tensor, labels, tau: float = 0.07) -> Tensor:
    """Within-modality loss; the anchor itself is left out of each denominator."""
    y = _check_batch(z, labels, tau)
    b = y.size
    sim = cosine_sim_matrix(z, z)
    return _masked_contrastive(sim, build_intra_mask(y), 1.0 - np.eye(b, dtype=np.float32), tau)


def supcon_inter_loss(image: Tensor, text: Tensor, labels, tau: float = 0.07,
                      symmetric: bool = False, include_diagonal: bool = False) -> Tensor:
    """Image-anchored cross-modal loss with every text sample in the denominator.

    ``symmetric`` averages with the text-anchored counterpart.
    """
    y = _check_batch(image, labels, tau)
    if text.shape != image.shape:
        raise ShapeError(f"inter loss: image {image.shape} vs text {text.shape}")
    b = y.size
    pos = build_inter_mask(y, include_diagonal)
    full = np.ones((b, b), dtype=np.float32)
    loss = _masked_contrastive(cosine_sim_matrix(image, text), pos, full, tau)
    if symmetric:
        back = _masked_contrastive(cosine_sim_matrix(text, image), pos, full, tau)
        loss = ag.mul(ag.add(loss, back), 0.5)
    return loss


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    y = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != y.size:
        raise ShapeError(f"cross entropy: logits {logits.shape} vs {y.size} labels")
    k = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(y.size), y] = 1.0
    picked = ag.sum(ag.mul(ag.log_softmax(logits, axis=1), onehot))
    return ag.div(picked, -float(y.size))


@dataclass
class LossBundle:
    ce: float
    cl_i: float
    cl_t: float
    cl_m: float
    total: float
    lam: float
    tau: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"ce": self.ce, "cl_i": self.cl_i, "cl_t": self.cl_t, "cl_m": self.cl_m,
                "total": self.total}


def _value(t: Tensor | None) -> float:
    return 0.0 if t is None else float(t.data)


def combined_loss(ce: Tensor | None, cl_i: Tensor | None, cl_t: Tensor | None,
                  cl_m: Tensor | None, lam: float, tau: float = 0.07,
                  mode: str = "one-step") -> LossBundle:
    """Record the loss components and build the objective for ``mode``.

    ``one-step`` sums lam*ce + cl_i + cl_t + cl_m. ``phase1`` omits cl_m and
    ``phase2`` is cl_m alone. Missing components count as zero.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if mode == "one-step":
        terms = [(lam, ce), (1.0, cl_i), (1.0, cl_t), (1.0, cl_m)]
    elif mode == "phase1":
        terms = [(lam, ce), (1.0, cl_i), (1.0, cl_t)]
    elif mode == "phase2":
        terms = [(1.0, cl_m)]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    graph = None
    for weight, t in terms:
        if t is None:
            continue
        part = t if weight == 1.0 else ag.mul(t, weight)
        graph = part if graph is None else ag.add(graph, part)
    total = float(graph.data) if graph is not None else 0.0
    return LossBundle(_value(ce), _value(cl_i), _value(cl_t), _value(cl_m), total, lam, tau, graph)
