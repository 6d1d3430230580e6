"""Minimal feed-forward substrate: dense / conv2d / relu / flatten layers with
explicit forward, backward, and SGD-with-momentum updates.

Networks are plain data (numpy float64 arrays) plus pure functions, so they
can be copied, diffed, and serialized without ceremony. Update helpers mutate
arrays in place and return the mutated object for chaining. Nothing here
spawns threads; networks and datasets are safe to share read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

__all__ = [
    "LayerSpec",
    "Network",
    "Gradients",
    "OptimizerState",
    "dense",
    "conv2d",
    "relu",
    "flatten",
    "output_shapes",
    "init_weights",
    "forward",
    "loss_only",
    "loss_and_backward",
    "sgd_momentum_step",
    "evaluate",
]


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one layer. Only `dense` and `conv2d` carry parameters."""

    kind: str
    fan_in: int | None = None
    fan_out: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    has_bias: bool = True

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if not self.has_params:
            d.pop("has_bias", None)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(**d)


def dense(fan_in: int, fan_out: int, has_bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out, has_bias=has_bias)


def conv2d(in_channels: int, out_channels: int, kernel_size: int,
           has_bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, has_bias=has_bias)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def output_shapes(specs: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Propagate a (batch-free) input shape through the layer stack.

    Returns the per-layer output shapes and rejects non-composable stacks
    with a diagnostic naming the offending layer.
    """
    shape = tuple(int(s) for s in input_shape)
    out: list[tuple[int, ...]] = []
    for i, spec in enumerate(specs):
        where = f"layer {i} ({spec.kind})"
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"{where}: expects a flat feature vector, got shape {shape}")
            if shape[0] != spec.fan_in:
                raise ValueError(f"{where}: fan_in {spec.fan_in} does not match input width {shape[0]}")
            shape = (spec.fan_out,)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"{where}: expects (channels, height, width), got shape {shape}")
            c, h, w = shape
            k = spec.kernel_size
            if c != spec.in_channels:
                raise ValueError(f"{where}: in_channels {spec.in_channels} does not match input channels {c}")
            if h < k or w < k:
                raise ValueError(f"{where}: kernel size {k} exceeds input {h}x{w}")
            shape = (spec.out_channels, h - k + 1, w - k + 1)
        elif spec.kind == "relu":
            pass
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        else:
            raise ValueError(f"{where}: unknown layer kind")
        out.append(shape)
    if not specs:
        raise ValueError("network needs at least one layer")
    if len(out[-1]) != 1:
        raise ValueError("network must end in a flat logits vector")
    return out


@dataclass
class Network:
    """A layer stack plus its parameters, aligned by layer index.

    `weights[i]` / `biases[i]` are None for parameter-free layers. Dense
    weights are (fan_out, fan_in); conv weights are (out_c, in_c, k, k).
    """

    input_shape: tuple[int, ...]
    specs: list[LayerSpec]
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]

    def copy(self) -> "Network":
        return Network(
            tuple(self.input_shape),
            list(self.specs),
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
        )

    def param_layers(self) -> list[int]:
        """Indices of layers that carry a weight tensor."""
        return [i for i, w in enumerate(self.weights) if w is not None]

    @property
    def num_classes(self) -> int:
        return output_shapes(self.specs, self.input_shape)[-1][0]


@dataclass
class Gradients:
    """Per-layer gradient tensors, congruent with Network.weights/biases."""

    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]


@dataclass
class OptimizerState:
    """Classical momentum buffers plus the scalar hyperparameters.

    `l2_scale` is applied to weight tensors only; biases are updated with
    plain momentum.
    """

    momentum: float
    l2_scale: float
    buffers_w: list[np.ndarray | None]
    buffers_b: list[np.ndarray | None]

    @staticmethod
    def for_network(net: Network, momentum: float, l2_scale: float = 0.0) -> "OptimizerState":
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if l2_scale < 0.0:
            raise ValueError(f"l2_scale must be >= 0, got {l2_scale}")
        return OptimizerState(
            momentum,
            l2_scale,
            [None if w is None else np.zeros_like(w) for w in net.weights],
            [None if b is None else np.zeros_like(b) for b in net.biases],
        )


def init_weights(specs: list[LayerSpec], input_shape: tuple[int, ...], seed: int) -> Network:
    """Build a Network with uniform [-sqrt(6/fan_in), +sqrt(6/fan_in)] weights.

    Conv layers use fan_in = in_channels * kernel_size^2. Biases start at
    zero. The same seed reproduces the same network bit for bit.
    """
    output_shapes(specs, input_shape)  # reject non-composable stacks up front
    rng = np.random.default_rng(seed)
    weights: list[np.ndarray | None] = []
    biases: list[np.ndarray | None] = []
    for spec in specs:
        if spec.kind == "dense":
            bound = np.sqrt(6.0 / spec.fan_in)
            weights.append(rng.uniform(-bound, bound, size=(spec.fan_out, spec.fan_in)))
            biases.append(np.zeros(spec.fan_out) if spec.has_bias else None)
        elif spec.kind == "conv2d":
            k = spec.kernel_size
            bound = np.sqrt(6.0 / (spec.in_channels * k * k))
            weights.append(rng.uniform(-bound, bound,
                                       size=(spec.out_channels, spec.in_channels, k, k)))
            biases.append(np.zeros(spec.out_channels) if spec.has_bias else None)
        else:
            weights.append(None)
            biases.append(None)
    return Network(tuple(int(s) for s in input_shape), list(specs), weights, biases)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C*k*k, oh*ow), rows ordered (channel, di, dj) to
    # match weight.reshape(out_c, -1)
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = x[:, :, di:di + oh, dj:dj + ow]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = h - k + 1, w - k + 1
    d = dcols.reshape(n, c, k, k, oh, ow)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di:di + oh, dj:dj + ow] += d[:, :, di, dj]
    return dx


def forward(net: Network, batch: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a batch through the network.

    Args:
        net: the network.
        batch: array of shape (N, *net.input_shape).

    Returns:
        (logits, cache) where logits has shape (N, num_classes) and cache
        holds each layer's input, as needed by loss_and_backward.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 2 or x.shape[1:] != tuple(net.input_shape):
        raise ValueError(
            f"network input: expected batch of shape (N, {', '.join(map(str, net.input_shape))}), "
            f"got {x.shape}")
    cache: list[np.ndarray] = []
    for i, spec in enumerate(net.specs):
        cache.append(x)
        if spec.kind == "dense":
            w, b = net.weights[i], net.biases[i]
            if x.shape[1] != w.shape[1]:
                raise ValueError(f"layer {i} (dense): input width {x.shape[1]} "
                                 f"does not match fan_in {w.shape[1]}")
            x = x @ w.T
            if b is not None:
                x = x + b
        elif spec.kind == "conv2d":
            w, b = net.weights[i], net.biases[i]
            out_c, in_c, k, _ = w.shape
            if x.shape[1] != in_c:
                raise ValueError(f"layer {i} (conv2d): input channels {x.shape[1]} "
                                 f"do not match in_channels {in_c}")
            n, _, h, ww = x.shape
            cols = _im2col(x, k)
            y = np.einsum("of,nfl->nol", w.reshape(out_c, -1), cols)
            if b is not None:
                y = y + b[:, None]
            x = y.reshape(n, out_c, h - k + 1, ww - k + 1)
        elif spec.kind == "relu":
            x = np.maximum(x, 0.0)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"layer {i}: unknown layer kind {spec.kind!r}")
    return x, cache


def _softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    # Stable log-softmax; returns (mean loss, dloss/dlogits already / N).
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels: expected shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def loss_only(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy of the batch, no gradients."""
    logits, _ = forward(net, batch)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    loss, _ = _softmax_cross_entropy(logits, labels)
    return loss


def loss_and_backward(net: Network, cache: list[np.ndarray], logits: np.ndarray,
                      labels: np.ndarray) -> tuple[float, Gradients]:
    """Mean softmax cross-entropy plus batch-averaged parameter gradients.

    `cache` must come from a forward() call on the same network and batch.
    """
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    loss, dx = _softmax_cross_entropy(logits, labels)
    gw: list[np.ndarray | None] = [None] * len(net.specs)
    gb: list[np.ndarray | None] = [None] * len(net.specs)
    for i in range(len(net.specs) - 1, -1, -1):
        spec, x = net.specs[i], cache[i]
        if spec.kind == "dense":
            w = net.weights[i]
            gw[i] = dx.T @ x
            if net.biases[i] is not None:
                gb[i] = dx.sum(axis=0)
            dx = dx @ w
        elif spec.kind == "conv2d":
            w = net.weights[i]
            out_c, in_c, k, _ = w.shape
            n = x.shape[0]
            cols = _im2col(x, k)
            dy = dx.reshape(n, out_c, -1)
            gw[i] = np.einsum("nol,nfl->of", dy, cols).reshape(w.shape)
            if net.biases[i] is not None:
                gb[i] = dy.sum(axis=(0, 2))
            dcols = np.einsum("of,nol->nfl", w.reshape(out_c, -1), dy)
            dx = _col2im(dcols, x.shape, k)
        elif spec.kind == "relu":
            dx = dx * (x > 0.0)
        elif spec.kind == "flatten":
            dx = dx.reshape(x.shape)
    return loss, Gradients(gw, gb)


def sgd_momentum_step(net: Network, grads: Gradients, state: OptimizerState,
                      lr: float) -> Network:
    """One classical-momentum update, in place.

    buffer <- momentum * buffer + (grad + l2_scale * weight)
    weight <- weight - lr * buffer

    Biases follow the same rule without the L2 term.
    """
    if lr < 0.0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    m, l2 = state.momentum, state.l2_scale
    for i in net.param_layers():
        g = grads.weights[i]
        if g is None or g.shape != net.weights[i].shape:
            raise ValueError(f"layer {i}: gradient shape does not match weights")
        buf = state.buffers_w[i]
        buf *= m
        buf += g + l2 * net.weights[i]
        net.weights[i] -= lr * buf
        if net.biases[i] is not None:
            bbuf = state.buffers_b[i]
            bbuf *= m
            bbuf += grads.biases[i]
            net.biases[i] -= lr * bbuf
    return net


def evaluate(net: Network, dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy loss and top-1 accuracy over a whole dataset.

    Batches are visited in fixed order, so the result is deterministic.
    """
    images, labels = dataset.images, np.asarray(dataset.labels)
    n = images.shape[0]
    if n == 0:
        raise ValueError("evaluate: dataset is empty")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits, _ = forward(net, xb)
        yb = _check_labels(yb, logits.shape[0], logits.shape[1])
        batch_loss, _ = _softmax_cross_entropy(logits, yb)
        loss_sum += batch_loss * xb.shape[0]
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n
