"""Windowed vision transformer built at initialization, in float64 by default.

A network has four stages. Each stage embeds its input with an overlapping
strided projection (kernel K_i > stride) followed by LayerNorm, then runs L_i
pre-norm blocks of windowed multi-head attention and a GELU FFN. The output is
the global average of the final-stage tokens.
"""

import copy
import logging
from typing import Callable, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from vitgauge.errors import EvaluationError
from vitgauge.flops import count_flops_for, projection_padding, window_layout
from vitgauge.topology import STAGE_STRIDES, ScaleSpec, TopologySpec, TopologyError, validate_scale

logger = logging.getLogger(__name__)

INIT_STD = 0.02
NORM_EPS = 1e-12
CUMULATIVE_STRIDE = 32
# Finite so fully padded windows stay finite; those tokens are cropped anyway.
MASK_VALUE = -1e9


class OverlapProjection(nn.Module):
    """Strided, optionally dilated, zero-padded convolution embedding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=kernel, stride=stride)
        self.norm = nn.LayerNorm(out_channels, eps=NORM_EPS)

    def forward(
        self,
        x: torch.Tensor,
        stride: Optional[Tuple[int, int]] = None,
        dilation: Optional[Tuple[int, int]] = None,
    ) -> torch.Tensor:
        """Embed (B, C, H, W) images or feature maps into (B, H', W', C') tokens."""
        stride = tuple(stride or (self.stride, self.stride))
        dilation = tuple(dilation or (1, 1))
        height, width = x.shape[-2:]
        top, bottom = projection_padding(self.kernel, stride[0], dilation[0], height)
        left, right = projection_padding(self.kernel, stride[1], dilation[1], width)
        x = F.pad(x, (left, right, top, bottom))
        x = F.conv2d(x, self.conv.weight, self.conv.bias, stride=stride, dilation=dilation)
        return self.norm(x.permute(0, 2, 3, 1))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside S x S non-shifted windows."""

    def __init__(self, dim: int, heads: int, split: int):
        super().__init__()
        if dim % heads:
            raise TopologyError(f"Width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.split = split
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, height, width, dim = x.shape
        (splits_h, splits_w), (window_h, window_w) = window_layout((height, width), self.split)
        pad_h = splits_h * window_h - height
        pad_w = splits_w * window_w - width
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))

        tokens = window_h * window_w
        windows = _partition(x, splits_h, splits_w, window_h, window_w)
        qkv = self.qkv(windows).reshape(-1, tokens, 3, self.heads, dim // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)

        scores = (q @ k.transpose(-2, -1)) * self.scale
        if pad_h or pad_w:
            valid = torch.zeros(1, splits_h * window_h, splits_w * window_w, 1, dtype=x.dtype, device=x.device)
            valid[:, :height, :width] = 1
            key_mask = _partition(valid, splits_h, splits_w, window_h, window_w)[..., 0] > 0
            key_mask = key_mask.repeat(batch, 1)
            scores = scores.masked_fill(~key_mask[:, None, None, :], MASK_VALUE)
        attn = scores.softmax(dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(-1, tokens, dim)
        out = self.proj(out)
        out = _merge(out, batch, splits_h, splits_w, window_h, window_w)
        return out[:, :height, :width]


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, expansion * dim)
        self.fc2 = nn.Linear(expansion * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm attention + FFN block with residual connections."""

    def __init__(self, dim: int, heads: int, split: int, expansion: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=NORM_EPS)
        self.attn = WindowAttention(dim, heads, split)
        self.norm2 = nn.LayerNorm(dim, eps=NORM_EPS)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class Stage(nn.Module):
    def __init__(self, in_channels: int, dim: int, kernel: int, stride: int,
                 depth: int, heads: int, split: int, expansion: int):
        super().__init__()
        self.embed = OverlapProjection(in_channels, dim, kernel, stride)
        self.blocks = nn.ModuleList([Block(dim, heads, split, expansion) for _ in range(depth)])

    def forward(self, x, stride=None, dilation=None) -> torch.Tensor:
        x = self.embed(x, stride, dilation)
        for block in self.blocks:
            x = block(x)
        return x


class VitNetwork(nn.Module):
    """Four-stage windowed ViT for one (topology, scale, seed).

    Inputs are (B, 3, R, R) images or their flattened (B, 3*R*R) form.
    Outputs are (B, 8C) pooled final-stage features.
    """

    def __init__(self, topology: TopologySpec, scale: ScaleSpec, input_res: int, seed: int = 0):
        super().__init__()
        self.topology = topology
        self.scale = scale
        self.input_res = input_res
        self.rng_seed = seed
        self.first_stride: Optional[Tuple[int, int]] = None
        self.first_dilation: Optional[Tuple[int, int]] = None

        stages = []
        in_channels = 3
        for i, dim in enumerate(scale.stage_widths):
            stages.append(Stage(
                in_channels,
                dim,
                kernel=topology.kernels[i],
                stride=STAGE_STRIDES[i],
                depth=scale.depths[i],
                heads=topology.stage_heads[i],
                split=topology.stage_splits[i],
                expansion=topology.expansions[i],
            ))
            in_channels = dim
        self.stages = nn.ModuleList(stages)

    @property
    def input_dim(self) -> int:
        return 3 * self.input_res * self.input_res

    @property
    def output_dim(self) -> int:
        return self.scale.stage_widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._as_images(x)
        for i, stage in enumerate(self.stages):
            if i == 0:
                tokens = stage(x, self.first_stride, self.first_dilation)
            else:
                tokens = stage(tokens.permute(0, 3, 1, 2))
        return tokens.mean(dim=(1, 2))

    def retokenized(self, stride: Tuple[int, int], dilation: Tuple[int, int]) -> "VitNetwork":
        """A view sharing every parameter, with a different first-projection sampling."""
        view = copy.copy(self)
        view.first_stride = tuple(stride)
        view.first_dilation = tuple(dilation)
        return view

    def initialize(self, seed: int) -> None:
        init_weights(self, seed)

    def _as_images(self, x: torch.Tensor) -> torch.Tensor:
        res = self.input_res
        if x.dim() == 2 and x.shape[1] == self.input_dim:
            x = x.reshape(-1, 3, res, res)
        elif x.dim() != 4 or tuple(x.shape[1:]) != (3, res, res):
            raise NetworkError(
                f"Expected input of shape (B, 3, {res}, {res}) or (B, {self.input_dim}), "
                f"got {tuple(x.shape)}"
            )
        dtype = next(self.parameters()).dtype
        return x.to(dtype)


def build_network(
    topology: TopologySpec,
    scale: ScaleSpec,
    seed: int = 0,
    input_res: int = 32,
    dtype: torch.dtype = torch.float64,
) -> VitNetwork:
    """Instantiate and initialize a network.

    Args:
        topology: Kernels, splits, expansions and head count.
        scale: Per-stage depths and base width.
        seed: Initialization seed; equal seeds give identical parameters.
        input_res: Square input resolution, a multiple of 32.
        dtype: Parameter dtype; float64 for metrics, float32 for training.

    Raises:
        TopologyError: If the resolution, depths, widths or head split are invalid.
    """
    if input_res <= 0 or input_res % CUMULATIVE_STRIDE:
        raise TopologyError(
            f"input_res {input_res} must be a positive multiple of the cumulative stride {CUMULATIVE_STRIDE}"
        )
    problems = validate_scale(scale, topology)
    if problems:
        raise TopologyError("; ".join(problems))
    if min(topology.kernels) < 1 or min(topology.splits) < 1 or min(topology.expansions) < 1:
        raise TopologyError(f"Kernels, splits and expansions must be positive: {topology}")

    net = materialize(lambda: VitNetwork(topology, scale, input_res, seed), dtype)
    net.initialize(seed)
    logger.debug("Built network %s %s seed=%d params=%d", topology, scale, seed, count_params(net))
    return net


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Truncated-normal weights, zero biases and unit LayerNorm.

    Draws come from a generator private to this call and never touch
    torch's global generator.
    """
    generator = torch.Generator().manual_seed(seed)
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(layer.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)
            nn.init.zeros_(layer.bias)
        elif isinstance(layer, nn.LayerNorm):
            nn.init.ones_(layer.weight)
            nn.init.zeros_(layer.bias)
    return module


def materialize(factory: Callable[[], nn.Module], dtype: torch.dtype) -> nn.Module:
    """Construct on the meta device and allocate uninitialized CPU storage.

    Construction draws nothing from any random generator; callers must run
    `init_weights` afterwards.
    """
    with torch.device("meta"):
        module = factory()
    return module.to_empty(device="cpu").to(dtype)


def forward(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Evaluate a network without tracking gradients."""
    with torch.no_grad():
        return net(x)


def param_gradients(net: nn.Module, x: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Reverse-mode gradient of the reduced output w.r.t. every parameter.

    Args:
        net: Any module; parameters are taken in `net.parameters()` order.
        x: Input batch.
        reduction: Only "sum" (sum of pooled outputs over batch and channels).

    Returns:
        Flat gradient vector aligned with the parameter ordering.

    Raises:
        NetworkError: For an unknown reduction or non-finite gradients.
    """
    if reduction != "sum":
        raise NetworkError(f"Unknown output reduction '{reduction}'")
    params = list(net.parameters())
    with torch.enable_grad():
        scalar = net(x).sum()
        grads = torch.autograd.grad(scalar, params, allow_unused=True)
    flat = torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])
    if not torch.isfinite(flat).all():
        raise NetworkError("Non-finite parameter gradient")
    return flat.detach()


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def count_flops(
    net: VitNetwork,
    input_res: Optional[int] = None,
    stride_override: Optional[Tuple[int, int]] = None,
    dilation_override: Optional[Tuple[int, int]] = None,
) -> int:
    """Multiply-accumulates per image, optionally with a re-tokenized first projection."""
    stride = stride_override or net.first_stride
    dilation = dilation_override or (net.first_dilation if stride_override is None else None)
    return count_flops_for(net.topology, net.scale, input_res or net.input_res, stride, dilation)


def _partition(x: torch.Tensor, splits_h: int, splits_w: int, window_h: int, window_w: int) -> torch.Tensor:
    batch, dim = x.shape[0], x.shape[-1]
    x = x.reshape(batch, splits_h, window_h, splits_w, window_w, dim)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(batch * splits_h * splits_w, window_h * window_w, dim)


def _merge(x: torch.Tensor, batch: int, splits_h: int, splits_w: int, window_h: int, window_w: int) -> torch.Tensor:
    dim = x.shape[-1]
    x = x.reshape(batch, splits_h, splits_w, window_h, window_w, dim)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(batch, splits_h * window_h, splits_w * window_w, dim)


class NetworkError(EvaluationError):
    """Raised when a network evaluation fails (shape mismatch, non-finite values)."""
