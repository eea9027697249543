"""Plain-SGD training for the stacked classifier and PGD attack inner loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grads import (
    CrossEntropyLoss,
    OutputDivergence,
    backward,
    forward_tape,
    grad_params,
)
from .model import StackedModel
from .records import PerturbationRecord

__all__ = [
    "TrainingDivergedError",
    "TrainConfig",
    "TrainResult",
    "train_classifier",
    "predict_logits",
    "accuracy",
    "pgd",
    "pgd_batch",
    "write_curve_csv",
]

PREDICT_CHUNK = 128


class TrainingDivergedError(RuntimeError):
    """Training loss became nonfinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 64
    seed: int = 42
    lambda_decay: float = 0.0
    freeze: tuple = ()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_decay < 0:
            raise ValueError("lambda_decay must be >= 0")


@dataclass
class TrainResult:
    model: StackedModel
    losses: list = field(default_factory=list)
    final_accuracy: float = 0.0


def predict_logits(model: StackedModel, inputs) -> np.ndarray:
    """Chunked batched logits for (B, T) token ids or (B, T, D) features."""
    arr = np.asarray(inputs)
    out = []
    for lo in range(0, arr.shape[0], PREDICT_CHUNK):
        chunk = arr[lo:lo + PREDICT_CHUNK]
        if chunk.ndim == 2 and np.issubdtype(chunk.dtype, np.integer):
            tape = forward_tape(model, None, tokens=chunk)
        else:
            tape = forward_tape(model, chunk.astype(np.float64))
        out.append(tape.logits)
    return np.concatenate(out, axis=0)


def accuracy(model: StackedModel, inputs, labels) -> float:
    preds = predict_logits(model, inputs).argmax(axis=1)
    return float(np.mean(preds == np.asarray(labels)))


def train_classifier(model: StackedModel, dataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch SGD with softmax cross-entropy, deterministic under cfg.seed.

    ``dataset`` is (inputs, labels) with binary integer labels. When
    cfg.lambda_decay > 0 the loss gains lambda * mean squared state norm
    (the tight-coupling regularizer); lambda 0 leaves the baseline loss
    arithmetic untouched.
    """
    inputs, labels = dataset
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    n = inputs.shape[0]
    params = model.parameters()
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                grads, loss_val = grad_params(model, inputs[idx],
                                              CrossEntropyLoss(labels[idx]),
                                              state_decay=cfg.lambda_decay,
                                              freeze=cfg.freeze)
            except FloatingPointError as exc:
                raise TrainingDivergedError(str(exc)) from exc
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(f"loss diverged to {loss_val}")
            for name, p in params:
                p -= cfg.learning_rate * grads[name]
            epoch_loss += loss_val
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return TrainResult(model=model, losses=losses,
                       final_accuracy=accuracy(model, inputs, labels))


def pgd_batch(model: StackedModel, x, epsilon: float, steps: int = 20,
              step_size: float | None = None, objective=None):
    """Batched l-inf PGD ascent on ``objective``; x is (B, T, D) features.

    Projection back into the epsilon-ball follows every step. Per item, if
    the final objective is below the initial one the zero perturbation is
    returned instead. Returns (delta, values_initial, values_final).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, ...]
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if step_size is None:
        step_size = epsilon / 4.0
    if objective is None:
        clean = forward_tape(model, x)
        objective = OutputDivergence(clean.logits)
    tape0 = forward_tape(model, x)
    vals0, _ = objective.evaluate(tape0)
    delta = np.zeros_like(x)
    if epsilon > 0:
        for _ in range(steps):
            tape = forward_tape(model, x + delta)
            _, seeds = objective.evaluate(tape)
            d_in, _ = backward(tape, d_logits=seeds.get("d_logits"),
                               delta_seed=seeds.get("delta_seed", 0.0),
                               want_params=False)
            delta = np.clip(delta + step_size * np.sign(d_in), -epsilon, epsilon)
    tape = forward_tape(model, x + delta)
    vals, _ = objective.evaluate(tape)
    worse = vals < vals0
    if np.any(worse):
        delta[worse] = 0.0
        vals = np.where(worse, vals0, vals)
    return delta, vals0, vals


def pgd(model: StackedModel, x, epsilon: float, steps: int = 20,
        step_size: float | None = None, objective=None) -> PerturbationRecord:
    """Single-sequence PGD returning a PerturbationRecord (l-inf constraint)."""
    x = np.asarray(x, dtype=np.float64)
    clean_logits = forward_tape(model, x[None, ...]).logits
    delta, v0, v1 = pgd_batch(model, x[None, ...], epsilon, steps=steps,
                              step_size=step_size, objective=objective)
    adv_logits = forward_tape(model, (x + delta[0])[None, ...]).logits
    return PerturbationRecord(
        strategy="pgd", budget=float(epsilon), delta=delta[0],
        objective_initial=float(v0[0]), objective_final=float(v1[0]),
        output_delta_norm=float(np.linalg.norm(adv_logits - clean_logits)))


def write_curve_csv(path, values, header=("step", "value")) -> None:
    """CSV trace (step, value); used for loss curves and PGD traces."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(v))])
