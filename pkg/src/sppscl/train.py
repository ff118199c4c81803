"""Two-phase gated training, its ablations, and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tape
from .config import TrainConfig
from .data import FeatureDataset, batches, split_indices
from .diagnostics import ClassificationMetrics, DistanceReport, classification_metrics, modal_distances
from .losses import (LossBundle, build_inter_mask, combined_loss, cosine_sim_matrix,
                     cross_entropy_loss, supcon_inter_loss, supcon_intra_loss)
from .model import ModelSpec, SPPModel
from .optim import AdamW, steplr

log = logging.getLogger(__name__)


@dataclass
class GateResult:
    fire: bool
    d: float
    c: int
    c_mask: int


def gate_should_fire(image, text, labels, alpha: float,
                     include_diagonal: bool = False) -> GateResult:
    """Decide whether the cross-modal loss runs for this batch.

    ``d`` is the mean matched-pair cosine similarity, ``c`` the number of
    image/text similarities strictly below ``d``; the gate fires iff
    ``c < alpha * c_mask`` where ``c_mask`` counts inter-mask positives.
    """
    sim = cosine_sim_matrix(ag.as_tensor(image), ag.as_tensor(text)).data
    d = float(np.mean(np.diag(sim))) if sim.size else 0.0
    c = int(np.count_nonzero(sim < sim.dtype.type(d)))
    c_mask = int(build_inter_mask(labels, include_diagonal).sum())
    return GateResult(bool(c < alpha * c_mask), d, c, c_mask)


@dataclass
class StepReport:
    phase1: LossBundle
    phase2: LossBundle | None = None
    gate: GateResult | None = None
    correct: int = 0
    size: int = 0

    @property
    def phase2_ran(self) -> bool:
        return self.phase2 is not None


def build_model(dataset: FeatureDataset, config: TrainConfig) -> SPPModel:
    e = dataset.extents
    spec = ModelSpec(image_channels=e["C_i"], text_channels=e["C_t"], num_classes=e["K"],
                     dim=config.dim, hidden_channels=config.hidden_channels,
                     lstm_hidden=config.lstm_hidden, pool_window=config.pool_window,
                     dropout=config.dropout, use_cmf=config.mode != "no-cmf")
    return SPPModel(spec, seed=config.seed)


class Trainer:
    """Owns the model, one AdamW instance shared by both phases, and the dropout stream."""

    def __init__(self, model: SPPModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = AdamW(model.named_parameters(), lr=config.lr,
                               weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(config.seed)

    def _update(self, tape: Tape, loss) -> None:
        self.optimizer.zero_grad()
        ag.backward(tape, loss)
        self.optimizer.step()

    def step(self, batch: FeatureDataset, phase2_allowed: bool = True) -> StepReport:
        cfg = self.config
        y = batch.labels
        with Tape() as tape:
            out = self.model(batch.image, batch.cls, batch.tokens, train=True, rng=self.rng)
            ce = cross_entropy_loss(out.logits, y)
            use_intra = cfg.mode not in ("no-intra", "ce-only")
            cl_i = supcon_intra_loss(out.image, y, cfg.tau) if use_intra else None
            cl_t = supcon_intra_loss(out.text, y, cfg.tau) if use_intra else None
            if cfg.mode == "one-step":
                cl_m = self._inter(out.image, out.text, y)
                bundle = combined_loss(ce, cl_i, cl_t, cl_m, cfg.lam, cfg.tau, "one-step")
            else:
                bundle = combined_loss(ce, cl_i, cl_t, None, cfg.lam, cfg.tau, "phase1")
        self._update(tape, bundle.graph)
        report = StepReport(bundle, correct=int((out.logits.data.argmax(1) == y).sum()), size=y.size)
        if cfg.mode in ("one-step", "ce-only") or not phase2_allowed:
            return report

        # no-inter keeps the re-extraction pass so it matches alpha=0 exactly
        alpha = 0.0 if cfg.mode == "no-inter" else cfg.alpha
        with Tape() as tape:
            image2, text2 = self.model.embed(batch.image, batch.cls, batch.tokens,
                                             train=True, rng=self.rng)
            gate = gate_should_fire(image2.data, text2.data, y, alpha,
                                    cfg.inter_include_diagonal)
            report.gate = gate
            if gate.fire:
                cl_m = self._inter(image2, text2, y)
                bundle2 = combined_loss(None, None, None, cl_m, cfg.lam, cfg.tau, "phase2")
        if gate.fire:
            self._update(tape, bundle2.graph)
            report.phase2 = bundle2
        return report

    def _inter(self, image, text, labels):
        cfg = self.config
        return supcon_inter_loss(image, text, labels, cfg.tau, symmetric=cfg.symmetric_inter,
                                 include_diagonal=cfg.inter_include_diagonal)

    def finetune_inter(self, batch: FeatureDataset) -> LossBundle:
        """Unconditional cross-modal update (second stage of the staged variant)."""
        with Tape() as tape:
            image, text = self.model.embed(batch.image, batch.cls, batch.tokens,
                                           train=True, rng=self.rng)
            bundle = combined_loss(None, None, None, self._inter(image, text, batch.labels),
                                   self.config.lam, self.config.tau, "phase2")
        self._update(tape, bundle.graph)
        return bundle


def train_step_two_phase(trainer: Trainer, batch: FeatureDataset) -> StepReport:
    return trainer.step(batch)


@dataclass
class EvalResult:
    metrics: ClassificationMetrics
    distances: DistanceReport
    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray

    def as_dict(self) -> dict:
        return {**self.metrics.as_dict(), "distances": self.distances.as_dict()}


def embed_dataset(model: SPPModel, dataset: FeatureDataset, batch_size: int):
    """Eval-mode head outputs and logits in consecutive batches (last one may be short)."""
    images, texts, logits = [], [], []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        out = model(dataset.image[sl], dataset.cls[sl], dataset.tokens[sl], train=False)
        images.append(out.image.data)
        texts.append(out.text.data)
        logits.append(out.logits.data)
    dim = model.spec.dim
    k = model.spec.num_classes
    cat = (lambda xs, w: np.concatenate(xs) if xs else np.zeros((0, w), dtype=np.float32))
    return cat(images, dim), cat(texts, dim), cat(logits, k)


def evaluate(model: SPPModel, dataset: FeatureDataset, config: TrainConfig | None = None,
             eval_batch_size: int | None = None) -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    if eval_batch_size is None:
        eval_batch_size = config.effective_eval_batch_size if config is not None else 64
    image, text, logits = embed_dataset(model, dataset, eval_batch_size)
    pred = logits.argmax(axis=1)
    metrics = classification_metrics(pred, dataset.labels, dataset.num_classes)
    return EvalResult(metrics, modal_distances(image, text, dataset.labels), image, text,
                      dataset.labels, pred)


@dataclass
class FitResult:
    model: SPPModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    splits: dict = field(default_factory=dict)
    final_state: dict = field(default_factory=dict, repr=False)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _epoch_record(epoch: int, lr: float, reports: list[StepReport], model: SPPModel,
                  train: FeatureDataset, val: FeatureDataset, config: TrainConfig,
                  stage: str) -> dict:
    n = len(reports)

    def mean_of(key, source):
        vals = [getattr(b, key) for b in source]
        return float(np.mean(vals)) if vals else 0.0

    p1 = [r.phase1 for r in reports]
    p2 = [r.phase2 for r in reports if r.phase2 is not None]
    gated = [r for r in reports if r.gate is not None]
    val_eval = evaluate(model, val, config)
    train_eval = evaluate(model, train, config)
    dist = val_eval.distances
    return {
        "epoch": epoch,
        "stage": stage,
        "lr": lr,
        "batches": n,
        "ce": mean_of("ce", p1),
        "cl_i": mean_of("cl_i", p1),
        "cl_t": mean_of("cl_t", p1),
        "cl_m": mean_of("cl_m", p2) if config.mode != "one-step" else mean_of("cl_m", p1),
        "total": mean_of("total", p1),
        "gate_fire_rate": (len(p2) / n) if n else 0.0,
        "gate_checks": len(gated),
        "train_accuracy": train_eval.metrics.accuracy,
        "val_accuracy": val_eval.metrics.accuracy,
        "val_weighted_f1": val_eval.metrics.weighted_f1,
        "val_macro_f1": val_eval.metrics.macro_f1,
        "iid": dist.iid,
        "ttd": dist.ttd,
        "itd": dist.itd,
        "spread": dist.spread,
    }


def fit(dataset: FeatureDataset, config: TrainConfig, splits: dict | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``config.epochs`` and return the best-validation checkpoint.

    Without explicit ``splits`` an 80/10/10 partition is drawn from ``config.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    splits = splits or split_indices(len(dataset), config.seed)
    for name in ("train", "val"):
        if len(splits.get(name, ())) == 0:
            raise ValueError(f"{name} split is empty")
    train, val = dataset.subset(splits["train"]), dataset.subset(splits["val"])
    model = build_model(dataset, config)
    trainer = Trainer(model, config)
    result = FitResult(model, splits=splits)

    best_key, best_state = None, model.state_dict()

    def run_epoch(epoch: int, stage: str) -> None:
        nonlocal best_key, best_state
        lr = steplr(epoch, config.lr, config.decay_period, config.decay_mult)
        trainer.optimizer.lr = lr
        reports = []
        for idx in batches(len(train), config.batch_size, _epoch_seed(config.seed, epoch)):
            batch = train.subset(idx)
            if stage == "finetune":
                bundle = trainer.finetune_inter(batch)
                reports.append(StepReport(LossBundle(0.0, 0.0, 0.0, 0.0, 0.0, config.lam, config.tau),
                                          phase2=bundle))
            else:
                reports.append(trainer.step(batch, phase2_allowed=not config.staged))
        record = _epoch_record(epoch, lr, reports, model, train, val, config, stage)
        result.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d lr %.2e loss %.4f fire %.2f val acc %.4f", epoch, lr, record["total"],
                 record["gate_fire_rate"], record["val_accuracy"])
        key = (record["val_accuracy"], record["val_weighted_f1"])
        if best_key is None or key >= best_key:
            best_key, best_state = key, model.state_dict()
            result.best_epoch = epoch

    for epoch in range(config.epochs):
        run_epoch(epoch, "joint")

    if config.staged and config.epochs > 0 and config.mode not in ("no-inter", "ce-only"):
        image, text, _ = embed_dataset(model, train, max(len(train), 1))
        gate = gate_should_fire(image, text, train.labels, config.alpha,
                                config.inter_include_diagonal)
        log.info("staged gate: fire=%s c=%d c_mask=%d", gate.fire, gate.c, gate.c_mask)
        if gate.fire:
            for epoch in range(config.epochs, config.epochs + config.staged_epochs):
                run_epoch(epoch, "finetune")

    result.final_state = model.state_dict()
    model.load_state_dict(best_state)
    return result
