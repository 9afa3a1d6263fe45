"""Synthetic three-class benchmark used for end-to-end, ablation and baseline runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .evalkit import EvalReport, evaluate_model, train_dmlp_baseline
from .features import FeatureSet, featurize_sessions
from .model import AlesalModel, ModelConfig, ablate
from .preprocess import PreprocessParams
from .synthgen import gen_dataset
from .train import FitResult, TrainConfig, fit

VARIANTS: Dict[str, dict] = {
    "full": dict(with_TA=True, with_PA=True),
    "ta_only": dict(with_TA=True, with_PA=False),
    "pa_only": dict(with_TA=False, with_PA=True),
    "none": dict(with_TA=False, with_PA=False),
}


def make_benchmark(seed: int, per_class_train: int = 300, per_class_test: int = 100,
                   params: PreprocessParams = PreprocessParams(), noise_std: float = 0.02) -> Tuple[FeatureSet, FeatureSet]:
    """Featurized train and test sets drawn from disjoint seed streams.

    Each generated session is exactly one window long, so the counts are
    window counts.
    """
    kw = dict(duration=params.window_sec, rate=params.rate, noise_std=noise_std)
    train = gen_dataset([per_class_train] * 3, [seed, 0], **kw)
    test = gen_dataset([per_class_test] * 3, [seed, 1], **kw)
    return featurize_sessions(train, params), featurize_sessions(test, params)


def model_config_for(data: FeatureSet, **overrides) -> ModelConfig:
    s = data.spectrograms.shape
    return ModelConfig(P=data.P, series_len=data.series.shape[2], n_frames=s[2], n_bins=s[3], **overrides)


@dataclass
class RunResult:
    name: str
    report: EvalReport
    fit: FitResult


def run_variant(name: str, train: FeatureSet, test: FeatureSet, seed: int,
                train_config: TrainConfig = TrainConfig()) -> RunResult:
    if name == "dmlp":
        res = train_dmlp_baseline(train, train_config=train_config, seed=seed)
    else:
        model = AlesalModel(ablate(model_config_for(train), **VARIANTS[name]), seed=seed)
        res = fit(model, train, None, train_config, seed=seed)
    return RunResult(name, evaluate_model(res.model, test), res)


def run_benchmark(seed: int, variants: List[str], per_class_train: int = 300, per_class_test: int = 100,
                  train_config: TrainConfig = TrainConfig(), data: Optional[Tuple[FeatureSet, FeatureSet]] = None
                  ) -> Dict[str, RunResult]:
    train, test = data if data is not None else make_benchmark(seed, per_class_train, per_class_test)
    return {name: run_variant(name, train, test, seed, train_config) for name in variants}
