"""Trainable projection heads on top of frozen encoder outputs."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Linear, Module, uniform_init, zeros_param

NUM_TEXT_LAYERS = 4


class ImageHead(Module):
    """conv1x1 -> batch norm -> relu -> global average pool -> affine -> relu -> dropout."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, in_channels: int, dim: int, rng: np.random.Generator,
                 hidden_channels: int = 256, dropout: float = 0.2):
        if min(in_channels, hidden_channels, dim) < 1:
            raise ValueError("image head extents must be positive")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.conv_weight = uniform_init(rng, (hidden_channels, in_channels), in_channels)
        self.conv_bias = zeros_param((hidden_channels,))
        self.bn_gamma = zeros_param((hidden_channels,), fill=1.0)
        self.bn_beta = zeros_param((hidden_channels,))
        self.running_mean = np.zeros(hidden_channels, dtype=np.float32)
        self.running_var = np.ones(hidden_channels, dtype=np.float32)
        self.proj = Linear(hidden_channels, dim, rng)
        self.dropout = dropout

    @property
    def in_channels(self) -> int:
        return self.conv_weight.shape[1]

    def __call__(self, feature_map: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if feature_map.ndim != 4 or feature_map.shape[1] != self.in_channels:
            raise ShapeError(
                f"image head expects (B, {self.in_channels}, H, W), got {feature_map.shape}")
        x = ag.conv1x1(feature_map, self.conv_weight, self.conv_bias)
        x = ag.batch_norm(x, self.bn_gamma, self.bn_beta, self.running_mean, self.running_var, train)
        x = ag.relu(x)
        x = ag.adaptive_avg_pool1x1(x)
        x = ag.relu(self.proj(x))
        return ag.dropout(x, self.dropout, train, rng)


class HierarchicalAttentionHead(Module):
    """Gate four encoder layers by their [CLS] summaries, merge, and run an LSTM.

    ``pool_window`` is the non-overlapping average-pool width applied along
    the channel axis after the layer sum; 1 leaves channels untouched.
    """

    def __init__(self, text_channels: int, dim: int, rng: np.random.Generator,
                 hidden: int = 128, pool_window: int = 1, dropout: float = 0.2):
        if text_channels % pool_window:
            raise ValueError(f"pool window {pool_window} must divide text channels {text_channels}")
        if min(hidden, dim) < 1:
            raise ValueError("hidden size and embedding dim must be positive")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.text_channels = text_channels
        self.pool_window = pool_window
        self.gate = Linear(NUM_TEXT_LAYERS, NUM_TEXT_LAYERS, rng)
        lstm_in = text_channels // pool_window
        self.w_ih = uniform_init(rng, (4 * hidden, lstm_in), lstm_in)
        self.w_hh = uniform_init(rng, (4 * hidden, hidden), hidden)
        b_ih = np.zeros(4 * hidden, dtype=np.float32)
        b_ih[hidden:2 * hidden] = 1.0  # forget gate
        self.b_ih = Tensor(b_ih, requires_grad=True)
        self.b_hh = zeros_param((4 * hidden,))
        self.proj = Linear(hidden, dim, rng)
        self.dropout = dropout

    def layer_gates(self, cls_stack: Tensor) -> Tensor:
        """(B, 4, 1, C_t) -> (B, 4) sigmoid gates."""
        if cls_stack.ndim != 4 or cls_stack.shape[1] != NUM_TEXT_LAYERS:
            raise ShapeError(f"layer gates expect (B, 4, 1, C_t), got {cls_stack.shape}")
        pooled = ag.mean(cls_stack, axis=(2, 3))
        return ag.sigmoid(self.gate(pooled))

    def merge_layers(self, gates: Tensor, tokens: Tensor) -> Tensor:
        """Gate tokens (B, 4, N, C_t) per layer, sum layers, pool channels."""
        b, _, n, c = tokens.shape
        weighted = ag.mul(ag.reshape(gates, (b, NUM_TEXT_LAYERS, 1, 1)), tokens)
        merged = ag.sum(weighted, axis=1)
        k = self.pool_window
        if k > 1:
            merged = ag.mean(ag.reshape(merged, (b, n, c // k, k)), axis=3)
        return merged

    def __call__(self, cls_stack: Tensor, tokens: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if tokens.ndim != 4 or tokens.shape[1] != NUM_TEXT_LAYERS or tokens.shape[2] < 1:
            raise ShapeError(f"HA head expects tokens (B, 4, N>=1, C_t), got {tokens.shape}")
        if tokens.shape[3] != self.text_channels:
            raise ShapeError(
                f"HA head built for {self.text_channels} channels, got tokens {tokens.shape}")
        if cls_stack.shape[0] != tokens.shape[0] or cls_stack.shape[3] != tokens.shape[3]:
            raise ShapeError(f"HA head: [CLS] stack {cls_stack.shape} vs tokens {tokens.shape}")
        gates = self.layer_gates(cls_stack)
        seq = self.merge_layers(gates, tokens)
        h = ag.lstm(seq, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        return ag.dropout(self.proj(h), self.dropout, train, rng)
