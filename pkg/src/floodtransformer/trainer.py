"""Training loop with deep supervision, Adam, evaluation and checkpointing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import TEST, TRAIN, DatasetManifest, Sample, augment, load_split
from .errors import EmptySplit, InvalidParam, ShapeMismatch
from .metrics import BinaryMask, FloodReport, aggregate, binarize, score
from .model import FloodTransformer
from .tensor import Tensor

log = logging.getLogger(__name__)

IOU_SMOOTH = 1.0


@dataclass
class TrainConfig:
    epochs: int = 1000
    max_steps: Optional[int] = None
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_bce: float = 1.0
    w_iou: float = 1.0
    # deep supervision weights for the aux heads on f0 (H/8), f1, f2 (H/2)
    aux_weights: Tuple[float, float, float] = (0.5, 0.3, 0.2)
    eval_every: int = 50
    checkpoint_path: Optional[str] = None
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise InvalidParam("epochs must be >= 0; batch_size and eval_every positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise InvalidParam("max_steps must be >= 0")
        if not (self.learning_rate > 0 and self.adam_eps > 0 and self.w_bce > 0 and self.w_iou > 0):
            raise InvalidParam("rates and loss weights must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidParam("Adam betas must lie in (0, 1)")
        if len(self.aux_weights) != 3 or min(self.aux_weights) < 0:
            raise InvalidParam("aux_weights needs three non-negative entries")


@dataclass
class TrainState:
    params: Dict[str, Tensor]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    best_miou: float = -math.inf
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, model: FloodTransformer, seed: int = 0) -> "TrainState":
        return cls(
            params=model.params,
            m={k: np.zeros_like(p.data) for k, p in model.params.items()},
            v={k: np.zeros_like(p.data) for k, p in model.params.items()},
            rng=np.random.default_rng(seed),
        )


# --- loss ------------------------------------------------------------------


def _truth_array(truth, shape) -> np.ndarray:
    y = truth.to_array() if isinstance(truth, BinaryMask) else np.asarray(truth)
    y = y.reshape(shape).astype(np.float64)
    return y


def soft_iou_loss(probs: Tensor, y: np.ndarray) -> Tensor:
    """``1 - (I + 1) / (U + 1)`` on probabilities."""
    yt = Tensor(y)
    inter = T.sum(T.mul(probs, yt))
    union = T.sub(T.add(T.sum(probs), T.sum(yt)), inter)
    ratio = T.div(T.add_scalar(inter, IOU_SMOOTH), T.add_scalar(union, IOU_SMOOTH))
    return T.add_scalar(T.scale(ratio, -1.0), 1.0)


def head_loss(logits: Tensor, y: np.ndarray, cfg: TrainConfig) -> Tensor:
    bce = T.mean(T.bce_with_logits(logits, y))
    iou = soft_iou_loss(T.sigmoid(logits), y)
    return T.add(T.scale(bce, cfg.w_bce), T.scale(iou, cfg.w_iou))


def loss(logits: Tensor, aux_logits: Sequence[Tensor], truth, cfg: TrainConfig) -> Tensor:
    """Composite BCE + soft-IoU on the main head plus weighted aux heads."""
    y = _truth_array(truth, logits.shape)
    if len(aux_logits) not in (0, len(cfg.aux_weights)):
        raise ShapeMismatch(f"expected {len(cfg.aux_weights)} aux heads, got {len(aux_logits)}")
    total = head_loss(logits, y, cfg)
    for w, aux in zip(cfg.aux_weights, aux_logits):
        if aux.shape != logits.shape:
            raise ShapeMismatch(f"aux logits {aux.shape} != main logits {logits.shape}")
        if w:
            total = T.add(total, T.scale(head_loss(aux, y, cfg), w))
    return total


def sample_loss(model: FloodTransformer, sample: Sample, cfg: TrainConfig) -> Tensor:
    out = model.forward(sample.image)
    return loss(out.logits, model.aux_logits(out.aux), sample.mask, cfg)


# --- optimizer -------------------------------------------------------------


def adam_step(state: TrainState, grads: Dict[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"grad for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)
    return state


# --- evaluation ------------------------------------------------------------


def evaluate(model, samples, threshold: float = 0.5) -> FloodReport:
    """Per-image forward, binarize, score, aggregate.

    ``model`` is anything with ``predict_proba(image) -> 1 x H x W``; a
    manifest argument is read for its test split.
    """
    if isinstance(samples, DatasetManifest):
        samples = load_split(samples, TEST, model.config.image_size)
    samples = list(samples)
    if not samples:
        raise EmptySplit("nothing to evaluate")
    scores = []
    for s in samples:
        pred = binarize(model.predict_proba(s.image), threshold)
        scores.append(score(s.id, pred, s.mask))
    return aggregate(scores)


class CopyTruth:
    """Stub predictor that returns the ground-truth mask of a known image."""

    def __init__(self, samples: Sequence[Sample]):
        self._masks = {self._key(s.image): s.mask for s in samples}

    @staticmethod
    def _key(image) -> bytes:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        return np.ascontiguousarray(arr, dtype=np.float64).tobytes()

    def predict_proba(self, image) -> np.ndarray:
        return self._masks[self._key(image)].to_array()[None].astype(np.float64)


# --- fit -------------------------------------------------------------------


@dataclass
class FitResult:
    state: TrainState
    history: List[dict]
    losses: List[float]  # one entry per optimizer step


def _grads(model: FloodTransformer) -> Dict[str, np.ndarray]:
    return {k: p.grad for k, p in model.params.items() if p.grad is not None}


def fit(
    model: FloodTransformer,
    train,
    cfg: TrainConfig,
    test: Optional[Sequence[Sample]] = None,
    state: Optional[TrainState] = None,
    history: Optional[List[dict]] = None,
) -> FitResult:
    """Train ``model`` in place.

    ``train`` is a manifest (its test split is used for evaluation) or a list
    of samples. Every ``eval_every`` steps a history record
    ``{step, loss, miou, pa}`` is appended, where ``loss`` is the mean
    training loss since the previous record and mIoU/PA come from the test
    samples (train samples when there are none). With ``checkpoint_path``
    set the model is saved whenever test mIoU improves.
    """
    if isinstance(train, DatasetManifest):
        size = model.config.image_size
        if test is None:
            test = load_split(train, TEST, size)
        train = load_split(train, TRAIN, size)
    train = list(train)
    if not train:
        raise EmptySplit("train split is empty")
    eval_set = list(test) if test else train
    state = state or TrainState.fresh(model, cfg.seed)
    history = history if history is not None else []
    losses: List[float] = []
    window: List[float] = []

    for _ in range(cfg.epochs):
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        order = state.rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, int(state.rng.integers(2**31))) for s in batch]
            model.zero_grad()
            with T.Tape():
                total = None
                for s in batch:
                    ls = sample_loss(model, s, cfg)
                    total = ls if total is None else T.add(total, ls)
                total = T.scale(total, 1.0 / len(batch))
            T.backward(total)
            adam_step(state, _grads(model), cfg)
            losses.append(total.item())
            window.append(total.item())

            if state.step % cfg.eval_every == 0:
                _record(model, eval_set, state, history, window, cfg)
                window = []
    if window:
        # close the run with a record for the final step
        _record(model, eval_set, state, history, window, cfg)
    model.zero_grad()
    return FitResult(state, history, losses)


def _record(model, eval_set, state: TrainState, history: List[dict], window, cfg: TrainConfig) -> None:
    report = evaluate(model, eval_set)
    rec = {
        "step": state.step,
        "loss": float(np.mean(window)),
        "miou": report.miou_mean,
        "pa": report.pa_mean,
    }
    history.append(rec)
    log.info("step %d loss %.4f miou %.4f pa %.4f", rec["step"], rec["loss"], rec["miou"], rec["pa"])
    if report.miou_mean > state.best_miou:
        state.best_miou = report.miou_mean
        if cfg.checkpoint_path:
            save_state(cfg.checkpoint_path, model, state)


# --- persistence -----------------------------------------------------------


def save_state(path, model: FloodTransformer, state: Optional[TrainState] = None) -> None:
    kv, arrays = {}, {}
    if state is not None:
        kv = {
            "train.step": str(state.step),
            "train.best_miou": repr(state.best_miou),
            "train.rng": json.dumps(state.rng.bit_generator.state, separators=(",", ":")),
        }
        arrays = {f"optim.m.{k}": a for k, a in state.m.items()}
        arrays.update({f"optim.v.{k}": a for k, a in state.v.items()})
    checkpoint.save(path, model, kv, arrays)


def load_state(path) -> Tuple[FloodTransformer, Optional[TrainState]]:
    model, kv, arrays = checkpoint.load(path)
    if "train.step" not in kv:
        return model, None
    state = TrainState.fresh(model)
    for k in model.params:
        state.m[k] = arrays.get(f"optim.m.{k}", state.m[k])
        state.v[k] = arrays.get(f"optim.v.{k}", state.v[k])
    state.step = int(kv["train.step"])
    state.best_miou = float(kv.get("train.best_miou", "-inf"))
    if "train.rng" in kv:
        state.rng.bit_generator.state = json.loads(kv["train.rng"])
    return model, state


HISTORY_FIELDS = ("step", "loss", "miou", "pa")


def write_history(path, history: Sequence[dict]) -> None:
    lines = ["#" + "\t".join(HISTORY_FIELDS)]
    lines += [f"{r['step']}\t{r['loss']:.6f}\t{r['miou']:.6f}\t{r['pa']:.6f}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


def read_history(path) -> List[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        step, lo, mi, pa = line.split("\t")
        out.append({"step": int(step), "loss": float(lo), "miou": float(mi), "pa": float(pa)})
    return out
