"""Classification metrics, report output and the MLP comparison baseline."""

from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .csi_data import CLASS_NAMES
from .features import FeatureSet
from .nn import ops
from .nn.checkpoint import dumps as ckpt_dumps
from .nn.checkpoint import loads as ckpt_loads
from .nn.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    confusion: np.ndarray  # [true, predicted] counts
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float  # percent
    weighted_f1: float  # percent
    macro_f1: float  # percent

    def to_text(self) -> str:
        lines = [f"accuracy     {self.accuracy:.2f}", f"weighted_f1  {self.weighted_f1:.2f}",
                 f"macro_f1     {self.macro_f1:.2f}", "", f"{'class':<8} {'prec':>7} {'recall':>7} {'f1':>7} {'support':>8}"]
        for c, name in enumerate(CLASS_NAMES[: len(self.f1)]):
            lines.append(f"{name:<8} {100 * self.precision[c]:7.2f} {100 * self.recall[c]:7.2f} "
                         f"{100 * self.f1[c]:7.2f} {int(self.support[c]):8d}")
        lines.append("")
        lines.append("confusion (rows: true, cols: predicted)")
        for c, row in enumerate(self.confusion):
            lines.append(f"{CLASS_NAMES[c]:<8} " + " ".join(f"{int(v):6d}" for v in row))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,class,value\n")
        buf.write(f"accuracy,all,{self.accuracy:.6f}\n")
        buf.write(f"weighted_f1,all,{self.weighted_f1:.6f}\n")
        buf.write(f"macro_f1,all,{self.macro_f1:.6f}\n")
        for c, name in enumerate(CLASS_NAMES[: len(self.f1)]):
            buf.write(f"precision,{name},{100 * self.precision[c]:.6f}\n")
            buf.write(f"recall,{name},{100 * self.recall[c]:.6f}\n")
            buf.write(f"f1,{name},{100 * self.f1[c]:.6f}\n")
            buf.write(f"support,{name},{int(self.support[c])}\n")
        for i, row in enumerate(self.confusion):
            for j, v in enumerate(row):
                buf.write(f"confusion,{CLASS_NAMES[i]}->{CLASS_NAMES[j]},{int(v)}\n")
        return buf.getvalue()

    def check_floors(self, floors: Dict[str, float]) -> List[str]:
        """Names of metrics in ``floors`` that fall below their floor."""
        return [k for k, v in sorted(floors.items()) if getattr(self, k) < v]


def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> np.ndarray:
    y_true, y_pred = np.asarray(y_true, int), np.asarray(y_pred, int)
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction arrays differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot score an empty test set")
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    absent = [CLASS_NAMES[c] for c in np.flatnonzero(support == 0)]
    if absent:
        warnings.warn(f"classes absent from the test set score F1 = 0: {', '.join(absent)}", stacklevel=2)
    return EvalReport(cm, precision, recall, f1, support, 100.0 * tp.sum() / total,
                      100.0 * float((support * f1).sum()) / total, 100.0 * float(f1.mean()))


def evaluate(predict: Callable[[np.ndarray, np.ndarray], np.ndarray], test: FeatureSet,
             batch_size: int = 256) -> EvalReport:
    """Score ``predict(series, specs) -> probabilities`` on a labeled feature set."""
    if len(test) == 0:
        raise ValueError("empty test set")
    preds = []
    for i in range(0, len(test), batch_size):
        sl = slice(i, i + batch_size)
        preds.append(np.asarray(predict(test.series[sl], test.spectrograms[sl])).argmax(axis=1))
    return report_from_confusion(confusion_matrix(test.labels, np.concatenate(preds)))


def evaluate_model(model, test: FeatureSet) -> EvalReport:
    return evaluate(lambda s, m: model.forward(s, m, training=False).probs, test)


# ---------------------------------------------------------------------------
# MLP baseline on concatenated amplitude series


@dataclass
class DmlpConfig:
    P: int = 4
    series_len: int = 200
    hidden: Sequence[int] = (256, 128, 64)
    n_classes: int = 3
    series_scale: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class DmlpOutput:
    logits: Tensor
    probs: np.ndarray
    extras: dict = field(default_factory=dict)


class DmlpModel:
    """Fully connected ReLU network over the concatenated per-pair PCA series."""

    def __init__(self, config: DmlpConfig = DmlpConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        sizes = [config.P * config.series_len, *config.hidden, config.n_classes]
        self.params: Dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(a)
            self.params[f"dense{i}.W"] = Tensor(rng.uniform(-bound, bound, (a, b)).astype(self.dtype), requires_grad=True)
            self.params[f"dense{i}.b"] = Tensor(rng.uniform(-bound, bound, (b,)).astype(self.dtype), requires_grad=True)
        self.n_layers = len(sizes) - 1

    def set_input_scales(self, series_scale: float, spec_scale: float = 1.0) -> None:
        self.config = replace(self.config, series_scale=float(series_scale))

    def forward(self, series: np.ndarray, specs=None, training: bool = False) -> DmlpOutput:
        c = self.config
        series = np.asarray(series)
        if series.shape[1:] != (c.P, c.series_len):
            raise ValueError(f"series shape {series.shape} does not match (B, {c.P}, {c.series_len})")
        x = Tensor((series.reshape(len(series), -1) * c.series_scale).astype(self.dtype))
        for i in range(self.n_layers):
            x = ops.dense(x, self.params[f"dense{i}.W"], self.params[f"dense{i}.b"])
            if i < self.n_layers - 1:
                x = ops.relu(x)
        return DmlpOutput(x, ops._softmax(x.data.astype(np.float64), axis=-1))

    def predict_proba(self, series, specs=None) -> np.ndarray:
        return self.forward(series).probs

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"param/{k}": v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k].data = arrays[f"param/{k}"].astype(self.dtype)

    def to_bytes(self, extra: Optional[dict] = None) -> bytes:
        meta = {"kind": "dmlp", "model": self.config.to_dict(), "dtype": self.dtype.name}
        meta.update(extra or {})
        return ckpt_dumps(self.state_arrays(), meta)

    @classmethod
    def from_bytes(cls, blob: bytes):
        arrays, meta = ckpt_loads(blob)
        if meta.get("kind") != "dmlp":
            raise ValueError(f"checkpoint holds a {meta.get('kind')!r} model")
        cfg = dict(meta["model"])
        cfg["hidden"] = tuple(cfg["hidden"])
        model = cls(DmlpConfig(**cfg), dtype=meta.get("dtype", "float32"))
        model.load_state_arrays(arrays)
        return model, meta


def train_dmlp_baseline(train: FeatureSet, config: Optional[DmlpConfig] = None, train_config=None, seed: int = 0,
                        val: Optional[FeatureSet] = None):
    """Fit the baseline with the same loss, optimizer and stopping rule as the main model."""
    from .train import TrainConfig, fit

    config = config or DmlpConfig(P=train.P, series_len=train.series.shape[2])
    model = DmlpModel(config, seed=seed)
    return fit(model, train, val, train_config or TrainConfig(), seed=seed)
