"""Mini-batch training loop shared by the classifier and the MLP baseline.

A trainable model exposes ``params`` (name -> Tensor), ``forward(series,
specs, training)`` returning an object with ``logits``, ``state_arrays()`` /
``load_state_arrays()`` and ``set_input_scales(series_scale, spec_scale)``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .features import FeatureSet
from .nn import ops
from .nn.optim import Adam
from .nn.tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 10
    val_fraction: float = 0.1
    fit_scales: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: Optional[float]
    val_acc: Optional[float]
    param_digest: str


@dataclass
class FitResult:
    model: object
    history: List[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def params_digest(model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k].data).tobytes())
    return h.hexdigest()[:16]


def split_validation(data: FeatureSet, fraction: float, rng: np.random.Generator) -> Tuple[FeatureSet, Optional[FeatureSet]]:
    """Stratified hold-out of ``fraction`` of each class."""
    if fraction <= 0:
        return data, None
    val_idx = []
    for c in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == c)
        n = int(round(fraction * len(idx)))
        val_idx.extend(rng.permutation(idx)[:n])
    if not val_idx:
        return data, None
    mask = np.zeros(len(data), bool)
    mask[val_idx] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))


def input_scales(data: FeatureSet) -> Tuple[float, float]:
    s = float(np.std(data.series, dtype=np.float64))
    m = float(np.std(data.spectrograms, dtype=np.float64))
    return (1.0 / s if s > 0 else 1.0), (1.0 / m if m > 0 else 1.0)


def evaluate_loss(model, data: FeatureSet, batch_size: int = 256) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    total, correct = 0.0, 0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        out = model.forward(data.series[sl], data.spectrograms[sl], training=False)
        y = data.labels[sl]
        total += float(ops.softmax_cross_entropy(out.logits, y).data) * len(y)
        correct += int((out.probs.argmax(axis=1) == y).sum())
    return total / len(data), correct / len(data)


def fit(model, train: FeatureSet, val: Optional[FeatureSet] = None, config: TrainConfig = TrainConfig(),
        seed: int = 0) -> FitResult:
    """Train ``model`` in place with Adam and early stopping on validation loss.

    When ``val`` is None a stratified ``config.val_fraction`` of ``train`` is
    held out. Validation data only selects the epoch whose parameters are
    kept; it never reaches a gradient. The best parameters are restored
    before returning.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if np.any(train.labels < 0):
        raise ValueError("training set contains unlabeled windows")
    rng = np.random.default_rng(seed)
    if val is None:
        train, val = split_validation(train, config.val_fraction, rng)
    if config.fit_scales:
        model.set_input_scales(*input_scales(train))
    opt = Adam(model.params, config.lr, config.beta1, config.beta2)
    result = FitResult(model)
    best_loss, best_state, since_best = math.inf, None, 0
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        try:
            for i in range(0, n, config.batch_size):
                idx = np.sort(order[i : i + config.batch_size])
                out = model.forward(train.series[idx], train.spectrograms[idx], training=True)
                y = train.labels[idx]
                loss = ops.softmax_cross_entropy(out.logits, y)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(epoch, "loss is not finite")
                opt.zero_grad()
                loss.backward()
                opt.step()
                loss_sum += float(loss.data) * len(idx)
                correct += int((out.probs.argmax(axis=1) == y).sum())
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        if not all(np.isfinite(p.data).all() for p in model.params.values()):
            raise TrainingDiverged(epoch, "parameters are not finite")
        val_loss = val_acc = None
        if val is not None:
            val_loss, val_acc = evaluate_loss(model, val)
        stats = EpochStats(epoch, loss_sum / n, correct / n, val_loss, val_acc, params_digest(model))
        result.history.append(stats)
        log.info("epoch %d train %.4f/%.3f val %s", epoch, stats.train_loss, stats.train_acc, val_loss)
        if val is None:
            continue
        if val_loss < best_loss:
            best_loss, since_best, result.best_epoch = val_loss, 0, epoch
            best_state = {k: np.array(v, copy=True) for k, v in model.state_arrays().items()}
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                break
    if best_state is not None:
        model.load_state_arrays(best_state)
    else:
        result.best_epoch = len(result.history)
    return result
