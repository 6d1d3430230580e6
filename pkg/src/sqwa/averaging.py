"""Averaging of captured quantized models on the exact step-size grid.

n captured models sharing a common per-layer step all have weights of the
form k * step, so their elementwise mean lives on the finer step / n grid.
The mean is computed by summing the integer levels and scaling once, which
keeps the result exactly grid-resident. Averaging n ternary models yields
at most 2n + 1 distinct values per layer, i.e. an effective bit width of
the smallest b' with 2^b' - 1 >= 2n + 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Network
from .quantizer import QuantizedModel, select_step_size, quantize_network

__all__ = [
    "CaptureEntry",
    "CaptureBank",
    "AveragedModel",
    "effective_bits",
    "average_models",
    "average_epoch_range",
    "requantize_averaged",
]


@dataclass
class CaptureEntry:
    """One captured model: the quantized weights that were live at the end
    of a cycle, the full-precision shadow behind them, and its metrics."""

    epoch: int
    model: QuantizedModel
    shadow: Network
    metrics: dict

    def __post_init__(self):
        sw = [self.shadow.weights[i] for i in self.shadow.param_layers()]
        qw = [self.model.net.weights[i] for i in self.model.net.param_layers()]
        if [w.shape for w in sw] != [w.shape for w in qw]:
            raise ValueError("shadow and quantized weights disagree in shape")


@dataclass
class CaptureBank:
    """Ordered collection of captures sharing one quantizer configuration."""

    bits: int
    steps: list[float]
    entries: list[CaptureEntry] = field(default_factory=list)

    def add(self, entry: CaptureEntry) -> None:
        if entry.model.bits != self.bits or list(entry.model.steps) != list(self.steps):
            raise ValueError("capture does not share the bank's quantizer configuration")
        if self.entries:
            first = self.entries[0].model.net
            new = entry.model.net
            if [w.shape for w in first.weights if w is not None] != \
                    [w.shape for w in new.weights if w is not None]:
                raise ValueError("capture shapes do not match the bank")
            if entry.epoch <= self.entries[-1].epoch:
                raise ValueError(f"capture epoch {entry.epoch} not after "
                                 f"{self.entries[-1].epoch}")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class AveragedModel:
    """Mean of n grid-resident models: weights on the step / n grid, biases
    full precision."""

    net: Network
    count: int
    base_steps: list[float]
    effective_bits: int


def effective_bits(n: int) -> int:
    """Smallest bit width whose 2^b - 1 levels cover the 2n + 1 values an
    n-model ternary average can take."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    b = 2
    while 2 ** b - 1 < 2 * n + 1:
        b += 1
    return b


def _average(entries: list[CaptureEntry], bits: int, steps: list[float]) -> AveragedModel:
    n = len(entries)
    template = entries[0].model.net
    out = template.copy()
    param_idx = template.param_layers()
    for j, i in enumerate(param_idx):
        step = steps[j]
        level_sum = np.zeros(template.weights[i].shape, dtype=np.int64)
        for e in entries:
            levels = np.rint(e.model.net.weights[i] / step)
            if not np.array_equal(levels * step, e.model.net.weights[i]):
                raise ValueError(f"layer {i}: captured weights are not on the shared grid")
            level_sum += levels.astype(np.int64)
        out.weights[i] = level_sum * (step / n)
    for i, b in enumerate(template.biases):
        if b is not None:
            out.biases[i] = np.mean([e.model.net.biases[i] for e in entries], axis=0)
    return AveragedModel(out, n, list(steps), effective_bits(n))


def average_models(bank: CaptureBank, last_n: int) -> AveragedModel:
    """Elementwise mean of the bank's last `last_n` captures."""
    if not (1 <= last_n <= len(bank)):
        raise ValueError(f"last_n must be in [1, {len(bank)}], got {last_n}")
    return _average(bank.entries[-last_n:], bank.bits, bank.steps)


def average_epoch_range(bank: CaptureBank, first_epoch: int, last_epoch: int) -> AveragedModel:
    """Mean of every capture with first_epoch <= epoch <= last_epoch."""
    chosen = [e for e in bank.entries if first_epoch <= e.epoch <= last_epoch]
    if not chosen:
        raise ValueError(f"no captures in epoch range [{first_epoch}, {last_epoch}]")
    return _average(chosen, bank.bits, bank.steps)


def requantize_averaged(avg: AveragedModel, target_bits: int) -> tuple[QuantizedModel, list[float]]:
    """Map an averaged model back onto a coarse grid with fresh per-layer
    MSE-minimizing step sizes. The result is the starting point for
    fine-tuning."""
    idx = avg.net.param_layers()
    steps = [select_step_size(avg.net.weights[i], target_bits) for i in idx]
    qnet = quantize_network(avg.net, target_bits, steps)
    return QuantizedModel(qnet, target_bits, steps), steps
