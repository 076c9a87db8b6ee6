"""Minimal deterministic CNN runtime: forward, backward, SGD training.

Activations are ``(batch, channels, height, width)`` arrays.  Convolution
kernels are ``(kh, kw, in_channels/groups, out_channels)`` tensors and the
convolution is cross-correlation-style indexing (no kernel flip): output
pixel (x, y) reads the input window starting at (x, y).  Stride is fixed
at 1; padding is ``"valid"`` or ``"same"`` (``same`` splits the kh-1 rows
as floor((kh-1)/2) on top and the rest below, likewise for columns).

Grouped convolutions partition channels: output channel t in group g reads
only input channels of group g; ``groups == in_channels == out_channels``
is the channel-wise case used by the factorized conv stacks.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import TrainingDiverged

__all__ = [
    "ConvLayer",
    "MaxoutLayer",
    "SoftmaxLayer",
    "NetworkSpec",
    "TrainConfig",
    "EpochStats",
    "conv_forward",
    "conv_backward",
    "maxout_forward",
    "maxout_backward",
    "softmax_cross_entropy",
    "train",
    "evaluate",
    "write_history_csv",
    "glorot_uniform",
    "random_conv_layer",
    "toy_conv_net",
]

PADDINGS = ("valid", "same")


@dataclass
class ConvLayer:
    """One convolution layer.

    kernel   (kh, kw, in_channels/groups, out_channels)
    groups   channel groups; must divide both channel counts
    padding  "valid" or "same"
    bias     optional per-output-channel offset
    frozen   excluded from weight updates during training
    inserted True for layers spliced in by a rewrite (freezable as a set)
    """

    kernel: np.ndarray
    groups: int = 1
    padding: str = "valid"
    bias: np.ndarray | None = None
    frozen: bool = False
    inserted: bool = False

    def __post_init__(self):
        k = np.asarray(self.kernel)
        if k.ndim != 4:
            raise ValueError(f"conv kernel must be 4D, got {k.ndim}D")
        if not np.all(np.isfinite(k)):
            raise ValueError("conv kernel contains non-finite elements")
        if self.groups < 1 or k.shape[3] % self.groups != 0:
            raise ValueError(
                f"groups={self.groups} must divide out_channels={k.shape[3]}"
            )
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}")
        if self.bias is not None:
            b = np.asarray(self.bias)
            if b.shape != (k.shape[3],):
                raise ValueError("bias length must equal out_channels")
            if not np.all(np.isfinite(b)):
                raise ValueError("bias contains non-finite elements")
            self.bias = b
        self.kernel = k

    @property
    def in_channels(self) -> int:
        return int(self.kernel.shape[2]) * self.groups

    @property
    def out_channels(self) -> int:
        return int(self.kernel.shape[3])

    @property
    def kernel_size(self) -> tuple[int, int]:
        return int(self.kernel.shape[0]), int(self.kernel.shape[1])

    def weight_count(self) -> int:
        return int(self.kernel.size)


@dataclass
class MaxoutLayer:
    """Channel-wise max over consecutive groups of ``group_size`` channels."""

    group_size: int

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")


@dataclass
class SoftmaxLayer:
    """Terminal classifier; consumes a (B, C, 1, 1) map and emits logits."""


Layer = ConvLayer | MaxoutLayer | SoftmaxLayer


def _pad_amounts(k: int) -> tuple[int, int]:
    return (k - 1) // 2, (k - 1) - (k - 1) // 2


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    (pt, pb), (pl, pr) = _pad_amounts(kh), _pad_amounts(kw)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Apply the layer to a (B, S, H, W) batch; returns (B, T, Ho, Wo)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4D, got {x.ndim}D")
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    kh, kw = layer.kernel_size
    xp = _pad_same(x, kh, kw) if layer.padding == "same" else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(
            f"spatial size {x.shape[2:]} too small for a {kh}x{kw} kernel"
        )
    out = _correlate(xp, layer.kernel, layer.groups)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return out


def _correlate(xp: np.ndarray, kernel: np.ndarray, groups: int) -> np.ndarray:
    kh, kw, spg, t = kernel.shape
    if kh == 1 and kw == 1 and groups == 1:
        return np.tensordot(xp, kernel[0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,S,Ho,Wo,kh,kw)
    if groups == 1:
        out = np.tensordot(win, kernel, axes=([1, 4, 5], [2, 0, 1]))
        return out.transpose(0, 3, 1, 2)
    if spg == 1 and t == groups:  # channel-wise
        return np.einsum("bcxyij,ijc->bcxy", win, kernel[:, :, 0, :])
    tpg = t // groups
    parts = []
    for g in range(groups):
        wg = win[:, g * spg:(g + 1) * spg]
        kg = kernel[:, :, :, g * tpg:(g + 1) * tpg]
        parts.append(np.tensordot(wg, kg, axes=([1, 4, 5], [2, 0, 1])))
    return np.concatenate(parts, axis=3).transpose(0, 3, 1, 2)


def conv_backward(
    layer: ConvLayer, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Exact gradients of :func:`conv_forward`.

    Returns ``(grad_input, grad_kernel, grad_bias)``; ``grad_bias`` is None
    when the layer has no bias.
    """
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    kh, kw, spg, t = layer.kernel.shape
    groups = layer.groups
    xp = _pad_same(x, kh, kw) if layer.padding == "same" else x
    expected = (x.shape[0], t, xp.shape[2] - kh + 1, xp.shape[3] - kw + 1)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out has shape {grad_out.shape}, expected {expected}")

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    gkernel = _grad_kernel(win, grad_out, layer.kernel.shape, groups)

    # grad wrt (padded) input: full correlation of grad_out with the
    # spatially flipped kernel, channel roles swapped.
    gp = np.pad(grad_out, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # (B,T,Hp,Wp,kh,kw)
    kflip = layer.kernel[::-1, ::-1]
    if groups == 1:
        gin = np.tensordot(gwin, kflip, axes=([1, 4, 5], [3, 0, 1])).transpose(0, 3, 1, 2)
    elif spg == 1 and t == groups:
        gin = np.einsum("bcxyij,ijc->bcxy", gwin, kflip[:, :, 0, :])
    else:
        tpg = t // groups
        parts = []
        for g in range(groups):
            gw = gwin[:, g * tpg:(g + 1) * tpg]
            kg = kflip[:, :, :, g * tpg:(g + 1) * tpg]
            parts.append(np.tensordot(gw, kg, axes=([1, 4, 5], [3, 0, 1])))
        gin = np.concatenate(parts, axis=3).transpose(0, 3, 1, 2)
    if layer.padding == "same":
        (pt, _), (pl, _) = _pad_amounts(kh), _pad_amounts(kw)
        gin = gin[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]

    gbias = grad_out.sum(axis=(0, 2, 3)) if layer.bias is not None else None
    return gin, gkernel, gbias


def _grad_kernel(win, grad_out, kshape, groups) -> np.ndarray:
    kh, kw, spg, t = kshape
    if groups == 1:
        gk = np.tensordot(win, grad_out, axes=([0, 2, 3], [0, 2, 3]))  # (S,kh,kw,T)
        return gk.transpose(1, 2, 0, 3)
    if spg == 1 and t == groups:
        gk = np.einsum("bcxyij,bcxy->ijc", win, grad_out)
        return gk.reshape(kh, kw, 1, t)
    tpg = t // groups
    gk = np.empty(kshape, dtype=win.dtype)
    for g in range(groups):
        wg = win[:, g * spg:(g + 1) * spg]
        gg = grad_out[:, g * tpg:(g + 1) * tpg]
        gk[:, :, :, g * tpg:(g + 1) * tpg] = np.tensordot(
            wg, gg, axes=([0, 2, 3], [0, 2, 3])
        ).transpose(1, 2, 0, 3)
    return gk


def maxout_forward(layer: MaxoutLayer, x: np.ndarray) -> np.ndarray:
    """Max over consecutive channel groups; ties resolve to the lowest index."""
    x = np.asarray(x)
    b, c, h, w = x.shape
    gs = layer.group_size
    if c % gs != 0:
        raise ValueError(f"{c} channels not divisible by maxout group size {gs}")
    return x.reshape(b, c // gs, gs, h, w).max(axis=2)


def maxout_backward(layer: MaxoutLayer, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    b, c, h, w = x.shape
    gs = layer.group_size
    xr = x.reshape(b, c // gs, gs, h, w)
    idx = xr.argmax(axis=2)  # first max wins ties
    gin = np.zeros_like(xr)
    np.put_along_axis(gin, idx[:, :, None], grad_out[:, :, None], axis=2)
    return gin.reshape(b, c, h, w)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt the logits.

    Log-sum-exp is shifted by the row max for stability.  The gradient is
    ``(softmax - onehot) / batch`` so that it differentiates the returned
    mean loss; for a single sample it is exactly ``softmax - onehot``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError("labels must be one class index per batch item")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


class NetworkSpec:
    """Named, ordered layer list with a fixed input shape.

    Shapes are chained at construction time, so an inconsistent
    architecture fails immediately.  The final layer must be the single
    :class:`SoftmaxLayer`, and the map reaching it must be (B, C, 1, 1).
    """

    def __init__(self, input_shape: tuple[int, int, int], layers: list[tuple[str, Layer]]):
        self.input_shape = tuple(int(d) for d in input_shape)
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError("input_shape must be (channels, height, width)")
        names = [name for name, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for name in names:
            if not name or "/" in name or "\\" in name:
                raise ValueError(f"invalid layer name {name!r}")
        softmaxes = [n for n, l in layers if isinstance(l, SoftmaxLayer)]
        if len(softmaxes) != 1 or not isinstance(layers[-1][1], SoftmaxLayer):
            raise ValueError("a network needs exactly one terminal SoftmaxLayer")
        self._layers = list(layers)
        self._input_shapes = self._chain_shapes()

    def _chain_shapes(self) -> dict[str, tuple[int, int, int]]:
        shapes = {}
        c, h, w = self.input_shape
        for name, layer in self._layers:
            shapes[name] = (c, h, w)
            if isinstance(layer, ConvLayer):
                if layer.in_channels != c:
                    raise ValueError(
                        f"layer {name!r} expects {layer.in_channels} channels, gets {c}"
                    )
                kh, kw = layer.kernel_size
                if layer.padding == "valid":
                    h, w = h - kh + 1, w - kw + 1
                if h < 1 or w < 1:
                    raise ValueError(f"layer {name!r} shrinks the map to nothing")
                c = layer.out_channels
            elif isinstance(layer, MaxoutLayer):
                if c % layer.group_size != 0:
                    raise ValueError(
                        f"layer {name!r}: {c} channels not divisible by {layer.group_size}"
                    )
                c //= layer.group_size
            else:  # softmax
                if (h, w) != (1, 1):
                    raise ValueError(
                        f"classifier {name!r} needs a 1x1 map, gets {h}x{w}"
                    )
        return shapes

    # -- structure ---------------------------------------------------------

    @property
    def layers(self) -> list[tuple[str, Layer]]:
        return list(self._layers)

    def names(self) -> list[str]:
        return [name for name, _ in self._layers]

    def layer(self, name: str) -> Layer:
        for n, layer in self._layers:
            if n == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def input_shape_of(self, name: str) -> tuple[int, int, int]:
        """(channels, height, width) of the map entering the named layer."""
        if name not in self._input_shapes:
            raise KeyError(f"no layer named {name!r}")
        return self._input_shapes[name]

    def num_classes(self) -> int:
        shape = self._input_shapes[self._layers[-1][0]]
        return shape[0]

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, [(n, copy.deepcopy(l)) for n, l in self._layers])

    def replaced(self, name: str, replacements: list[tuple[str, Layer]]) -> "NetworkSpec":
        """New network with the named layer swapped for ``replacements``."""
        if name not in self.names():
            raise KeyError(f"no layer named {name!r}")
        out = []
        for n, layer in self._layers:
            if n == name:
                out.extend((rn, copy.deepcopy(rl)) for rn, rl in replacements)
            else:
                out.append((n, copy.deepcopy(layer)))
        return NetworkSpec(self.input_shape, out)

    def weight_count(self) -> int:
        total = 0
        for _, layer in self._layers:
            if isinstance(layer, ConvLayer):
                total += layer.weight_count()
                if layer.bias is not None:
                    total += layer.bias.size
        return total

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the batch through all layers; returns (B, num_classes) logits."""
        return self._trace(x)[-1]

    def _trace(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-layer inputs followed by the final logits."""
        acts = [np.asarray(x)]
        h = acts[0]
        for name, layer in self._layers:
            if isinstance(layer, ConvLayer):
                h = conv_forward(layer, h)
            elif isinstance(layer, MaxoutLayer):
                h = maxout_forward(layer, h)
            else:
                if h.shape[2] != 1 or h.shape[3] != 1:
                    raise ValueError(
                        f"classifier {name!r} needs a 1x1 map, got {h.shape[2:]}"
                    )
                h = h[:, :, 0, 0]
            acts.append(h)
        return acts


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    grad_clip_norm: float | None = None
    freeze_inserted: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: float


def train(net: NetworkSpec, data, cfg: TrainConfig, eval_data=None):
    """SGD with momentum; returns ``(trained copy, per-epoch history)``.

    Batches are drawn from a per-epoch shuffle of the seeded generator.
    Frozen layers (and, with ``cfg.freeze_inserted``, inserted ones) keep
    their weights bit-for-bit.  Epoch metrics are measured by a full pass
    over the dataset in storage order after the epoch's updates.  A
    non-finite batch loss aborts with the offending batch index.
    """
    if len(data) < 1:
        raise ValueError("dataset is empty")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    images, labels = data.images, data.labels
    n = len(data)

    trainable = [
        (name, layer)
        for name, layer in net.layers
        if isinstance(layer, ConvLayer)
        and not (layer.frozen or (cfg.freeze_inserted and layer.inserted))
    ]
    velocity: dict[str, list[np.ndarray]] = {
        name: [np.zeros_like(layer.kernel)]
        + ([np.zeros_like(layer.bias)] if layer.bias is not None else [])
        for name, layer in trainable
    }

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = _batch_gradients(net, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi}", epoch, bi
                )
            _apply_update(trainable, grads, velocity, cfg)
        loss, train_acc = _dataset_metrics(net, images, labels)
        if eval_data is not None:
            _, eval_acc = _dataset_metrics(net, eval_data.images, eval_data.labels)
        else:
            eval_acc = train_acc
        history.append(EpochStats(epoch, loss, train_acc, eval_acc))
    return net, history


def _batch_gradients(net: NetworkSpec, xb, yb):
    acts = net._trace(xb)
    loss, grad = softmax_cross_entropy(acts[-1], yb)
    grads: dict[str, list[np.ndarray]] = {}
    layers = net.layers
    for i in range(len(layers) - 1, -1, -1):
        name, layer = layers[i]
        x_in = acts[i]
        if isinstance(layer, SoftmaxLayer):
            grad = grad[:, :, None, None]
        elif isinstance(layer, MaxoutLayer):
            grad = maxout_backward(layer, x_in, grad)
        else:
            grad, gk, gb = conv_backward(layer, x_in, grad)
            grads[name] = [gk] + ([gb] if gb is not None else [])
    return loss, grads


def _apply_update(trainable, grads, velocity, cfg: TrainConfig):
    if cfg.grad_clip_norm is not None:
        sq = 0.0
        for name, _ in trainable:
            for g in grads[name]:
                sq += float(np.vdot(g, g))
        gnorm = np.sqrt(sq)
        if gnorm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / gnorm
            for name, _ in trainable:
                grads[name] = [g * scale for g in grads[name]]
    for name, layer in trainable:
        params = [layer.kernel] + ([layer.bias] if layer.bias is not None else [])
        for p, v, g in zip(params, velocity[name], grads[name]):
            v *= cfg.momentum
            v += g
            p -= cfg.learning_rate * v


def _dataset_metrics(net: NetworkSpec, images, labels, batch_size: int = 256):
    """Loss and accuracy over a dataset, accumulated in storage order."""
    n = len(labels)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits = net.forward(xb)
        loss, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


def evaluate(net: NetworkSpec, data, batch_size: int = 256) -> float:
    """Fraction of correct argmax predictions (ties -> lowest class index)."""
    _, acc = _dataset_metrics(net, data.images, data.labels, batch_size)
    return acc


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_acc", "eval_acc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.loss), repr(row.train_acc), repr(row.eval_acc)])


# ---------------------------------------------------------------------------
# initialization helpers


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def random_conv_layer(
    rng: np.random.Generator,
    kh: int,
    kw: int,
    in_channels: int,
    out_channels: int,
    groups: int = 1,
    padding: str = "valid",
    with_bias: bool = True,
    inserted: bool = False,
) -> ConvLayer:
    """Conv layer with zero-mean uniform weights scaled by fan-in/fan-out."""
    spg = in_channels // groups
    fan_in = kh * kw * spg
    fan_out = kh * kw * (out_channels // groups)
    kernel = glorot_uniform(rng, (kh, kw, spg, out_channels), fan_in, fan_out)
    bias = np.zeros(out_channels) if with_bias else None
    return ConvLayer(kernel, groups=groups, padding=padding, bias=bias, inserted=inserted)


def toy_conv_net(
    num_classes: int,
    channels: int = 3,
    image_size: int = 24,
    conv1_size: int = 9,
    conv1_out: int = 16,
    seed: int = 0,
) -> NetworkSpec:
    """The desk-scale two-conv benchmark network.

    conv1 (conv1_size x conv1_size, valid) -> maxout/2 -> head conv that
    collapses the rest of the map to 1x1 -> softmax.  ``conv1`` is the
    intended rewrite target.
    """
    rng = np.random.default_rng(seed)
    rest = image_size - conv1_size + 1
    layers = [
        ("conv1", random_conv_layer(rng, conv1_size, conv1_size, channels, conv1_out)),
        ("act1", MaxoutLayer(2)),
        ("head", random_conv_layer(rng, rest, rest, conv1_out // 2, num_classes)),
        ("softmax", SoftmaxLayer()),
    ]
    return NetworkSpec((channels, image_size, image_size), layers)
