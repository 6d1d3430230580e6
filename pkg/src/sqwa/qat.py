"""Quantized-weight training with full-precision shadow parameters.

The forward pass, the loss, and the gradients all use the quantized
(applied) weights; the update is applied to a full-precision shadow copy,
which is re-quantized after every step under the frozen per-layer step
sizes. Gradients too small to push a shadow weight across a grid midpoint
therefore leave the applied weights untouched while still accumulating in
the shadow. Biases are never quantized: the applied model always carries
the shadow's biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .averaging import CaptureBank, CaptureEntry
from .data import Dataset, shuffle_batches
from .nn import Network, OptimizerState, evaluate, forward, loss_and_backward, sgd_momentum_step
from .quantizer import (QuantizedModel, QuantizerConfig, quantize_network,
                        quantize_tensor, select_step_size)
from .schedule import CyclicalSchedule, capture_epochs, lr_at

__all__ = ["ShadowModel", "qat_train_step", "retrain", "finetune"]


@dataclass
class ShadowModel:
    """Full-precision shadow network plus its quantized applied view.

    Invariant: applied weights equal quantize(shadow weights) under the
    frozen `steps`, and applied biases mirror the shadow biases.
    """

    shadow: Network
    applied: Network
    bits: int
    steps: list[float]

    @staticmethod
    def from_network(net: Network, bits: int, steps: list[float] | None = None) -> "ShadowModel":
        """Wrap a full-precision network. Steps are selected per layer by
        MSE minimization unless given (e.g. frozen from an earlier stage)."""
        shadow = net.copy()
        if steps is None:
            steps = [select_step_size(shadow.weights[i], bits) for i in shadow.param_layers()]
        applied = quantize_network(shadow, bits, list(steps))
        return ShadowModel(shadow, applied, bits, list(steps))

    def refresh_applied(self) -> None:
        """Re-quantize the shadow into the applied view."""
        idx = self.shadow.param_layers()
        for i, step in zip(idx, self.steps):
            self.applied.weights[i] = quantize_tensor(
                self.shadow.weights[i], QuantizerConfig(self.bits, step))
        for i, b in enumerate(self.shadow.biases):
            self.applied.biases[i] = None if b is None else b.copy()

    def as_quantized(self) -> QuantizedModel:
        """Deep-copied snapshot of the applied model."""
        return QuantizedModel(self.applied.copy(), self.bits, list(self.steps))

    def copy(self) -> "ShadowModel":
        return ShadowModel(self.shadow.copy(), self.applied.copy(), self.bits, list(self.steps))


def qat_train_step(model: ShadowModel, batch: np.ndarray, labels: np.ndarray,
                   lr: float, opt: OptimizerState) -> ShadowModel:
    """One training step on quantized weights.

    Forward, loss, and gradients are computed on the applied (quantized)
    network; the momentum update lands on the shadow; the applied view is
    rebuilt from the updated shadow. Mutates `model` and returns it.
    """
    logits, cache = forward(model.applied, batch)
    _, grads = loss_and_backward(model.applied, cache, logits, labels)
    sgd_momentum_step(model.shadow, grads, opt, lr)
    model.refresh_applied()
    return model


def _run_epoch(model: ShadowModel, dataset: Dataset, lr: float, opt: OptimizerState,
               batch_size: int, seed: int, epoch: int) -> None:
    for xb, yb in shuffle_batches(dataset, batch_size, seed, epoch):
        qat_train_step(model, xb, yb, lr, opt)


def retrain(model: ShadowModel, dataset: Dataset, schedule: CyclicalSchedule,
            epochs: int, seed: int, *, batch_size: int = 32, momentum: float = 0.9,
            eval_dataset: Dataset | None = None,
            on_epoch_end=None) -> tuple[ShadowModel, CaptureBank]:
    """Cyclical-rate retraining with a capture at the end of every period.

    No L2 penalty is applied: it fights the clipping built into the
    quantizer. Captures hold a deep copy of the applied model, the shadow
    behind it, and metrics on `dataset` (plus `eval_dataset` when given).
    `on_epoch_end(epoch, lr, model)` is called after every epoch.
    """
    if not (1 <= epochs <= schedule.total_epochs):
        raise ValueError(f"epochs must be in [1, {schedule.total_epochs}], got {epochs}")
    opt = OptimizerState.for_network(model.shadow, momentum, l2_scale=0.0)
    capture_at = set(capture_epochs(schedule))
    bank = CaptureBank(model.bits, list(model.steps))
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        _run_epoch(model, dataset, lr, opt, batch_size, seed, epoch)
        if on_epoch_end is not None:
            on_epoch_end(epoch, lr, model)
        if epoch in capture_at:
            loss, acc = evaluate(model.applied, dataset)
            metrics = {"train_loss": loss, "train_accuracy": acc}
            if eval_dataset is not None:
                tl, ta = evaluate(model.applied, eval_dataset)
                metrics["test_loss"] = tl
                metrics["test_accuracy"] = ta
            bank.add(CaptureEntry(epoch, model.as_quantized(), model.shadow.copy(), metrics))
    return model, bank


def finetune(model: ShadowModel, dataset: Dataset, initial_lr: float, epochs: int,
             decay: float, seed: int, *, batch_size: int = 32,
             momentum: float = 0.9) -> ShadowModel:
    """Short quantized fine-tune: lr = initial_lr * decay^epoch, no L2.

    Zero epochs returns the model unchanged.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs and (initial_lr <= 0.0 or not (0.0 < decay <= 1.0)):
        raise ValueError("need initial_lr > 0 and decay in (0, 1]")
    opt = OptimizerState.for_network(model.shadow, momentum, l2_scale=0.0)
    for epoch in range(epochs):
        lr = initial_lr * decay ** epoch
        _run_epoch(model, dataset, lr, opt, batch_size, seed, epoch)
    return model
