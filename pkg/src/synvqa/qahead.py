"""Output pooling and the three answer heads.

Fused word, frame, and clip rows are projected to a common output width,
stacked, and pooled by self-attention into one vector. Heads: answer
classification (cross-entropy), count regression (squared error, rounded
and clamped prediction), and candidate ranking (margin loss).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .numcore import (
    Tensor,
    concat_rows,
    cross_entropy_logits,
    leaky_relu,
    relu,
    row_softmax,
    tensor,
)

TASK_KINDS = ("open_ended", "count", "multiple_choice")
COUNT_MIN, COUNT_MAX = 0, 10


@dataclass
class HeadParams:
    """Projections to the output width plus the task-specific readout."""

    W_oq: Tensor
    W_1o: Tensor
    W_2o: Tensor
    W_of: Tensor | None = None
    W_om: Tensor | None = None
    classifier: Tensor | None = None
    regressor: Tensor | None = None
    scorer: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        return {f.name: t for f in fields(self) if (t := getattr(self, f.name)) is not None}


def init_head_params(
    rng: np.random.Generator,
    d_w: int,
    d_v: int,
    d_o: int,
    task: str,
    n_answers: int | None = None,
    use_frames: bool = True,
    use_clips: bool = True,
) -> HeadParams:
    if task not in TASK_KINDS:
        raise ValueError(f"unknown task {task!r}")
    def mat(r, c):
        return tensor(rng.normal(size=(r, c)) / np.sqrt(r))

    p = HeadParams(W_oq=mat(d_w, d_o), W_1o=mat(d_o, d_o), W_2o=mat(d_o, 1))
    if use_frames:
        p.W_of = mat(d_v, d_o)
    if use_clips:
        p.W_om = mat(d_v, d_o)
    if task == "open_ended":
        if not n_answers or n_answers < 2:
            raise ValueError("open_ended needs an answer vocabulary of >= 2")
        p.classifier = mat(d_o, n_answers)
    elif task == "count":
        p.regressor = mat(d_o, 1)
    else:
        p.scorer = mat(d_o, 1)
    return p


def project_concat(
    Q: Tensor, F: Tensor | None, M: Tensor | None, p: HeadParams
) -> Tensor:
    """Row-stack the projected modalities: word rows, then frames, then clips."""
    parts = [Q @ p.W_oq]
    if F is not None:
        if p.W_of is None:
            raise ValueError("head has no frame projection")
        parts.append(F @ p.W_of)
    if M is not None:
        if p.W_om is None:
            raise ValueError("head has no clip projection")
        parts.append(M @ p.W_om)
    return concat_rows(parts)


def attention_pool(Y: Tensor, W_1o: Tensor, W_2o: Tensor, slope: float = 0.01) -> Tensor:
    """Convex combination of Y rows, weighted by a learned scoring column."""
    logits = leaky_relu(Y @ W_1o, slope) @ W_2o
    weights = row_softmax(logits.T)
    return weights @ Y


def open_ended_logits(y: Tensor, p: HeadParams) -> Tensor:
    if p.classifier is None:
        raise ValueError("head was not built for open_ended")
    return y @ p.classifier


def open_ended_loss(y: Tensor, answer_index: int, p: HeadParams) -> Tensor:
    return cross_entropy_logits(open_ended_logits(y, p), answer_index)


def count_output(y: Tensor, p: HeadParams) -> Tensor:
    if p.regressor is None:
        raise ValueError("head was not built for count")
    return y @ p.regressor


def count_loss(y: Tensor, target: float, p: HeadParams) -> Tensor:
    if not COUNT_MIN <= target <= COUNT_MAX:
        raise ValueError(f"count target {target} outside [{COUNT_MIN}, {COUNT_MAX}]")
    diff = count_output(y, p) - float(target)
    return (diff * diff).sum()


def count_predict(raw: float) -> int:
    """Round half up, then clamp into the supported count range."""
    return int(np.clip(np.floor(raw + 0.5), COUNT_MIN, COUNT_MAX))


def mc_score(y: Tensor, p: HeadParams) -> Tensor:
    if p.scorer is None:
        raise ValueError("head was not built for multiple_choice")
    return y @ p.scorer


def hinge_loss(scores: Sequence[Sequence[Tensor]], truths: Sequence[int]) -> Tensor:
    """Margin loss over candidate scores, averaged across questions.

    Every candidate is compared against the true one, the true candidate
    included, so each question contributes a constant 1 at minimum.
    """
    if len(scores) == 0:
        raise ValueError("empty batch")
    if len(scores) != len(truths):
        raise ValueError("scores and truths differ in length")
    total = None
    for cand_scores, t in zip(scores, truths):
        if not 0 <= t < len(cand_scores):
            raise IndexError(f"truth index {t} outside 0..{len(cand_scores) - 1}")
        s_t = cand_scores[t]
        for s_i in cand_scores:
            term = relu(1.0 + s_i - s_t).sum()
            total = term if total is None else total + term
    return total * (1.0 / len(scores))
