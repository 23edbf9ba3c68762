"""Estimator facade over the training pipeline.

X is a sequence of Example objects (targets travel inside them), so fit
takes y=None. The class follows the fit/transform/predict convention and
plays well with clone(), get_params(), and set_params().
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .pipeline import (
    DataError,
    Example,
    TrainConfig,
    _pooled,
    evaluate,
    predict_example,
    train,
)


def _as_examples(X) -> list[Example]:
    out = list(X)
    for item in out:
        if not isinstance(item, Example):
            raise DataError(
                f"expected Example inputs, got {type(item).__name__}"
            )
    return out


class HypergraphVQA(BaseEstimator):
    """Video QA over syntactic hypergraphs with transport-based alignment.

    Constructor arguments mirror the training config one to one; values
    are validated at fit time, not at construction.
    """

    def __init__(
        self,
        d_w: int = 300,
        d_v: int = 2048,
        d: int = 256,
        d_o: int = 256,
        l: int = 1,
        ot_iters: int = 10,
        lr: float = 0.01,
        momentum: float = 0.9,
        optimizer: str = "sgd",
        epochs: int = 10,
        batch_size: int = 16,
        seed: int = 0,
        weight_decay: float = 1e-4,
        ot_mode: str = "ot",
        syntax_mode: str = "hypergraph",
        use_frames: bool = True,
        use_clips: bool = True,
        use_context: bool = False,
        rescale_plan: bool = False,
        task: str = "open_ended",
        n_answers: int = 0,
    ):
        self.d_w = d_w
        self.d_v = d_v
        self.d = d
        self.d_o = d_o
        self.l = l
        self.ot_iters = ot_iters
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.weight_decay = weight_decay
        self.ot_mode = ot_mode
        self.syntax_mode = syntax_mode
        self.use_frames = use_frames
        self.use_clips = use_clips
        self.use_context = use_context
        self.rescale_plan = rescale_plan
        self.task = task
        self.n_answers = n_answers

    def _config(self) -> TrainConfig:
        fields = [f.name for f in dataclasses.fields(TrainConfig)]
        return TrainConfig(**{name: getattr(self, name) for name in fields})

    def fit(self, X, y=None):
        """Train on a sequence of Examples; y must be None."""
        if y is not None:
            raise DataError("targets are read from the examples; pass y=None")
        model, cfg, log = train(self._config(), _as_examples(X))
        self.model_ = model
        self.config_ = cfg
        self.log_ = log
        return self

    def predict(self, X) -> np.ndarray:
        """Answer index, clamped count, or chosen candidate per example."""
        check_is_fitted(self, "model_")
        return np.array(
            [predict_example(self.model_, self.config_, ex) for ex in _as_examples(X)]
        )

    def transform(self, X) -> np.ndarray:
        """Pooled per-example representations, one d_o row each."""
        check_is_fitted(self, "model_")
        rows = []
        for ex in _as_examples(X):
            if ex.task == "multiple_choice":
                raise DataError(
                    "transform needs a single question tree per example; "
                    "multiple_choice examples carry one per candidate"
                )
            pooled = _pooled(
                self.model_, self.config_, ex.graph(), ex.Q, ex.F, ex.M
            )
            rows.append(pooled.data.reshape(-1))
        return np.vstack(rows) if rows else np.empty((0, self.config_.d_o))

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform(X)

    def score(self, X, y=None) -> float:
        """Accuracy, or negated MSE for the count task (higher is better)."""
        check_is_fitted(self, "model_")
        metrics = evaluate(self.model_, self.config_, _as_examples(X))
        if "mse" in metrics:
            return -metrics["mse"]
        return metrics["accuracy"]
