"""Full network: two heads, cross-modal fusion, classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .fusion import Classifier, CrossModalFusion
from .heads import HierarchicalAttentionHead, ImageHead
from .nn import Module


@dataclass(frozen=True)
class ModelSpec:
    image_channels: int
    text_channels: int
    num_classes: int
    dim: int = 32
    hidden_channels: int = 256
    lstm_hidden: int = 128
    pool_window: int = 1
    dropout: float = 0.2
    use_cmf: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Outputs:
    image: Tensor
    text: Tensor
    fused: Tensor
    logits: Tensor


class SPPModel(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.image_head = ImageHead(spec.image_channels, spec.dim, rng,
                                    spec.hidden_channels, spec.dropout)
        self.text_head = HierarchicalAttentionHead(spec.text_channels, spec.dim, rng,
                                                   spec.lstm_hidden, spec.pool_window, spec.dropout)
        self.fusion = CrossModalFusion(spec.dim, rng) if spec.use_cmf else None
        width = 4 * spec.dim if spec.use_cmf else 2 * spec.dim
        self.classifier = Classifier(width, spec.num_classes, rng, spec.dropout)

    def embed(self, image, cls, tokens, train: bool = False,
              rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Head outputs (I_p, T_p) before normalization."""
        i_p = self.image_head(ag.as_tensor(image), train, rng)
        t_p = self.text_head(ag.as_tensor(cls), ag.as_tensor(tokens), train, rng)
        return i_p, t_p

    def __call__(self, image, cls, tokens, train: bool = False,
                 rng: np.random.Generator | None = None) -> Outputs:
        i_p, t_p = self.embed(image, cls, tokens, train, rng)
        if self.fusion is not None:
            _, _, fused = self.fusion(i_p, t_p)
        else:
            fused = ag.concat([i_p, t_p], axis=-1)
        return Outputs(i_p, t_p, fused, self.classifier(fused, train, rng))

    def head_parameter_names(self) -> set[str]:
        return {n for n in self.named_parameters() if n.startswith(("image_head.", "text_head."))}
