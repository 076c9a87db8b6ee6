"""Kernel factorization and the equivalent four-convolution stack.

A square d x d x S x T kernel whose tensor admits a rank-R decomposition
factors into four matrices: two spatial (d x R each), one over input
channels (S x R), one over output channels (T x R).  The original layer is
then algebraically equal to the composition

    1x1 conv S->R  ->  dx1 channel-wise conv  ->  1xd channel-wise conv
                   ->  1x1 conv R->T (+ original bias)

with all cross-channel mixing confined to the two 1x1 layers.  The stack
carries R(S + 2d + T) weights against the original S*T*d^2, and the same
ratio holds for per-pixel multiply-adds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cp
from .nn import ConvLayer, NetworkSpec, conv_forward, random_conv_layer
from .tensor_ops import as_tensor, relative_error

__all__ = [
    "KernelCPFactors",
    "ConvStack",
    "CostReport",
    "decompose_kernel",
    "build_conv_stack",
    "random_conv_stack",
    "splice_conv_stack",
    "rewrite_network",
    "complexity",
    "METHODS",
]

METHODS = ("nls", "als", "greedy")


@dataclass
class KernelCPFactors:
    """The four factor matrices of a decomposed square conv kernel.

    kx, ky  spatial factors, d x R (first and second kernel axis)
    ks      input-channel factor, S x R
    kt      output-channel factor, T x R
    """

    kx: np.ndarray
    ky: np.ndarray
    ks: np.ndarray
    kt: np.ndarray
    rank: int

    def __post_init__(self):
        mats = {"kx": self.kx, "ky": self.ky, "ks": self.ks, "kt": self.kt}
        for name, m in mats.items():
            m = as_tensor(m, name)
            if m.ndim != 2:
                raise ValueError(f"{name} must be a matrix")
            if m.shape[1] != self.rank:
                raise ValueError(
                    f"{name} has {m.shape[1]} columns, expected rank {self.rank}"
                )
            setattr(self, name, m)
        if self.kx.shape[0] != self.ky.shape[0]:
            raise ValueError("spatial factors disagree on kernel size")

    @property
    def kernel_size(self) -> int:
        return int(self.kx.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.ks.shape[0])

    @property
    def out_channels(self) -> int:
        return int(self.kt.shape[0])

    @classmethod
    def from_decomposition(cls, d: cp.CPDecomposition) -> "KernelCPFactors":
        if len(d.factors) != 4:
            raise ValueError("kernel decompositions have four modes")
        kx, ky, ks, kt = d.normalized().factors
        return cls(kx, ky, ks, kt, d.rank)

    def to_decomposition(self) -> cp.CPDecomposition:
        return cp.CPDecomposition([self.kx, self.ky, self.ks, self.kt])

    def to_kernel(self) -> np.ndarray:
        """Dense d x d x S x T tensor of the factorization."""
        return cp.reconstruct([self.kx, self.ky, self.ks, self.kt])


def decompose_kernel(
    kernel,
    rank: int,
    method: str = "nls",
    cfg: cp.SolverConfig | None = None,
    warm_start: cp.CPDecomposition | None = None,
) -> tuple[KernelCPFactors, float]:
    """Factor a square 4D kernel; returns the factors and the relative
    reconstruction error ``||K' - K|| / ||K||``."""
    kernel = as_tensor(kernel, "kernel")
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4D, got {kernel.ndim}D")
    if kernel.shape[0] != kernel.shape[1]:
        raise ValueError(
            f"kernel spatial dims must be square, got {kernel.shape[0]}x{kernel.shape[1]}"
        )
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "nls":
        d = cp.cp_nls(kernel, rank, cfg, warm_start=warm_start)
    elif method == "als":
        d = cp.cp_als(kernel, rank, cfg, warm_start=warm_start)
    else:
        if warm_start is not None:
            raise ValueError("greedy deflation does not take a warm start")
        d = cp.cp_greedy(kernel, rank, cfg)
    factors = KernelCPFactors.from_decomposition(d)
    return factors, relative_error(factors.to_kernel(), kernel)


@dataclass
class ConvStack:
    """The four layers replacing one convolution, in application order."""

    layers: list[ConvLayer]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = conv_forward(layer, h)
        return h

    def weight_count(self) -> int:
        return sum(layer.weight_count() for layer in self.layers)


def build_conv_stack(
    factors: KernelCPFactors,
    bias: np.ndarray | None = None,
    padding: str = "valid",
) -> ConvStack:
    """Materialize the four-layer stack from kernel factors.

    Layer kernels come straight from the factor columns; the bias (if any)
    rides on the final 1x1 layer so the composition equals the original
    affine map.  The two spatial layers are channel-wise (R groups).
    """
    d, r = factors.kernel_size, factors.rank
    s, t = factors.in_channels, factors.out_channels
    l1 = ConvLayer(
        factors.ks.reshape(1, 1, s, r).copy(), padding=padding, inserted=True
    )
    l2 = ConvLayer(
        factors.kx.reshape(d, 1, 1, r).copy(), groups=r, padding=padding, inserted=True
    )
    l3 = ConvLayer(
        factors.ky.reshape(1, d, 1, r).copy(), groups=r, padding=padding, inserted=True
    )
    l4 = ConvLayer(
        np.ascontiguousarray(factors.kt.T).reshape(1, 1, r, t),
        padding=padding,
        bias=None if bias is None else np.asarray(bias).copy(),
        inserted=True,
    )
    return ConvStack([l1, l2, l3, l4])


def random_conv_stack(
    d: int,
    in_channels: int,
    out_channels: int,
    rank: int,
    rng: np.random.Generator,
    with_bias: bool = True,
    padding: str = "valid",
) -> ConvStack:
    """Same architecture as :func:`build_conv_stack`, random weights.

    The from-scratch baseline for method comparisons.
    """
    l1 = random_conv_layer(rng, 1, 1, in_channels, rank, padding=padding,
                           with_bias=False, inserted=True)
    l2 = random_conv_layer(rng, d, 1, rank, rank, groups=rank, padding=padding,
                           with_bias=False, inserted=True)
    l3 = random_conv_layer(rng, 1, d, rank, rank, groups=rank, padding=padding,
                           with_bias=False, inserted=True)
    l4 = random_conv_layer(rng, 1, 1, rank, out_channels, padding=padding,
                           with_bias=with_bias, inserted=True)
    return ConvStack([l1.  __class__(l1.kernel, padding=padding, inserted=True) if False else l1, l2, l3, l4])


def splice_conv_stack(
    net: NetworkSpec, layer_name: str, factors: KernelCPFactors
) -> ConvStack:
    raise NotImplementedError


def _validate_target(net: NetworkSpec, layer_name: str) -> ConvLayer:
    target = net.layer(layer_name)
    if not isinstance(target, ConvLayer):
        raise ValueError(f"layer {layer_name!r} is not a convolution")
    kh, kw = target.kernel_size
    if kh != kw:
        raise ValueError(f"layer {layer_name!r} has a non-square {kh}x{kw} kernel")
    if kh == 1:
        raise ValueError(
            f"layer {layer_name!r} is a 1x1 convolution; the four-layer "
            "rewrite would be pure overhead"
        )
    if target.groups != 1:
        raise ValueError(f"layer {layer_name!r} is grouped; rewrite expects dense channels")
    return target


def rewrite_network(
    net: NetworkSpec,
    layer_name: str,
    rank: int,
    method: str = "nls",
    cfg: cp.SolverConfig | None = None,
) -> NetworkSpec:
    """Decompose the named layer's kernel and splice in the four-layer stack.

    The input network is not mutated; inserted layers are flagged so
    training can optionally freeze them.
    """
    target = _validate_target(net, layer_name)
    factors, _ = decompose_kernel(target.kernel, rank, method, cfg)
    return splice_factors(net, layer_name, factors)


def splice_factors(
    net: NetworkSpec, layer_name: str, factors: KernelCPFactors
) -> NetworkSpec:
    """Replace the named conv layer with the stack built from ``factors``."""
    target = _validate_target(net, layer_name)
    if factors.kernel_size != target.kernel_size[0]:
        raise ValueError(
            f"factors are for a {factors.kernel_size}x{factors.kernel_size} kernel, "
            f"layer {layer_name!r} has {target.kernel_size[0]}x{target.kernel_size[1]}"
        )
    if factors.in_channels != target.in_channels or factors.out_channels != target.out_channels:
        raise ValueError(
            f"factors map {factors.in_channels}->{factors.out_channels} channels, "
            f"layer {layer_name!r} maps {target.in_channels}->{target.out_channels}"
        )
    stack = build_conv_stack(factors, bias=target.bias, padding=target.padding)
    names = [f"{layer_name}.cp{i}" for i in (1, 2, 3, 4)]
    return net.replaced(layer_name, list(zip(names, stack.layers)))


@dataclass(frozen=True)
class CostReport:
    """Parameter / per-pixel multiply-add counts for one layer geometry.

    ``original`` is S*T*d^2, ``cp`` is R(S+2d+T) for the four-layer stack,
    ``jaderberg`` is Rd(S+T) for the two-component scheme (reported for
    comparison only).  Each count doubles as the per-output-pixel
    multiply-add count, so the ratios cover both storage and work.  Bias
    terms are excluded throughout.
    """

    d: int
    s: int
    t: int
    rank: int
    original: int
    cp: int
    jaderberg: int
    ratio_cp: float
    ratio_jaderberg: float

    def as_text(self) -> str:
        return "\n".join(
            [
                f"layer geometry: d={self.d} S={self.s} T={self.t} rank={self.rank}",
                f"original parameters / madds per pixel: {self.original}",
                f"cp stack parameters / madds per pixel: {self.cp}",
                f"two-component parameters / madds per pixel: {self.jaderberg}",
                f"original/cp ratio: {self.ratio_cp:.6g}",
                f"original/two-component ratio: {self.ratio_jaderberg:.6g}",
            ]
        )


def complexity(d: int, s: int, t: int, rank: int) -> CostReport:
    """Closed-form cost comparison of the original layer and its rewrites."""
    if min(d, s, t, rank) < 1:
        raise ValueError("all dimensions must be positive")
    original = s * t * d * d
    cp_count = rank * (s + 2 * d + t)
    jaderberg = rank * d * (s + t)
    return CostReport(
        d=d, s=s, t=t, rank=rank,
        original=original, cp=cp_count, jaderberg=jaderberg,
        ratio_cp=original / cp_count,
        ratio_jaderberg=original / jaderberg,
    )
