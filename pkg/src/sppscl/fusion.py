"""Cross-modal fusion by modality-modulated batch attention, plus the classifier."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Linear, Module


class CrossModalFusion(Module):
    """Batch-level self-attention whose queries and keys are scaled by the other modality.

    Attention runs across the samples of a batch (a B x B map), so batch
    composition affects the fused features; a batch of one reduces to the
    value projection.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.q_image = Linear(dim, dim, rng)
        self.k_image = Linear(dim, dim, rng)
        self.v_image = Linear(dim, dim, rng)
        self.q_text = Linear(dim, dim, rng)
        self.k_text = Linear(dim, dim, rng)
        self.v_text = Linear(dim, dim, rng)

    def attention(self, anchor: Tensor, modulator: Tensor, which: str) -> Tensor:
        """Row-stochastic B x B attention map for ``anchor`` modulated by ``modulator``."""
        q, k, _ = self._projections(which)
        self._check(anchor, modulator)
        qm = ag.mul(q(anchor), modulator)
        km = ag.mul(k(anchor), modulator)
        scores = ag.div(ag.matmul(qm, ag.transpose(km)), math.sqrt(self.dim))
        return ag.softmax(scores, axis=-1)

    def attend(self, anchor: Tensor, modulator: Tensor, which: str) -> Tensor:
        _, _, v = self._projections(which)
        attn = self.attention(anchor, modulator, which)
        return ag.matmul(attn, v(anchor))

    def __call__(self, image: Tensor, text: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return (I_m, T_m, M_p) with M_p = [I_m, T_m, I_p, T_p]."""
        if image.shape != text.shape:
            raise ShapeError(f"fusion: image {image.shape} and text {text.shape} must match")
        image_m = self.attend(image, text, "image")
        text_m = self.attend(text, image, "text")
        return image_m, text_m, ag.concat([image_m, text_m, image, text], axis=-1)

    def _projections(self, which: str):
        if which == "image":
            return self.q_image, self.k_image, self.v_image
        if which == "text":
            return self.q_text, self.k_text, self.v_text
        raise ValueError(f"which must be 'image' or 'text', got {which!r}")

    def _check(self, anchor: Tensor, modulator: Tensor) -> None:
        if anchor.ndim != 2 or anchor.shape[1] != self.dim or anchor.shape[0] < 1:
            raise ShapeError(f"fusion: expected (B>=1, {self.dim}) anchor, got {anchor.shape}")
        if modulator.shape != anchor.shape:
            raise ShapeError(f"fusion: modulator {modulator.shape} vs anchor {anchor.shape}")


class Classifier(Module):
    """Dropout followed by an affine map to raw logits."""

    def __init__(self, in_features: int, num_classes: int, rng: np.random.Generator,
                 dropout: float = 0.2):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.fc = Linear(in_features, num_classes, rng)
        self.dropout = dropout

    def __call__(self, fused: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if fused.ndim != 2 or fused.shape[1] != self.fc.in_features:
            raise ShapeError(
                f"classifier expects (B, {self.fc.in_features}) features, got {fused.shape}")
        return self.fc(ag.dropout(fused, self.dropout, train, rng))
