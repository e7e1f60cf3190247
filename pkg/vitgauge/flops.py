"""Analytic parameter and multiply-accumulate counts for windowed ViTs.

Counts follow the exact layer geometry used by `vitgauge.network`, so they
agree with a materialised network without allocating any weights.
"""

import math
from typing import List, Optional, Tuple

from vitgauge.topology import NUM_STAGES, STAGE_STRIDES, ScaleSpec, TopologySpec, TopologyError

Grid = Tuple[int, int]


def projection_padding(kernel: int, stride: int, dilation: int = 1, size: int = 0) -> Tuple[int, int]:
    """Zero padding (before, after) for one axis of an overlapping projection.

    The input is padded so the projection yields ceil(size / stride) outputs,
    split as evenly as possible. Without a size, the padding for a side
    divisible by the stride is returned.
    """
    extent = kernel_extent(kernel, dilation)
    if size <= 0:
        total = extent - stride
    else:
        total = (conv_output_size(size, stride) - 1) * stride + extent - size
    total = max(total, 0)
    return total // 2, total - total // 2


def kernel_extent(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) + 1


def conv_output_size(size: int, stride: int) -> int:
    """Output length of a padded projection along one axis."""
    return -(-size // stride) if size > 0 else 0


def window_layout(grid: Grid, split: int) -> Tuple[Grid, Grid]:
    """Window partition of a token grid.

    Returns:
        ((windows_h, windows_w), (window_h, window_w)). The split is clamped
        to the grid side; the grid is padded up to windows * window.
    """
    height, width = grid
    splits = (min(split, height), min(split, width))
    window = (math.ceil(height / splits[0]), math.ceil(width / splits[1]))
    return splits, window


def stage_grids(
    topology: TopologySpec,
    input_res: int,
    stride: Optional[Grid] = None,
    dilation: Optional[Grid] = None,
) -> List[Grid]:
    """Token grid of every stage.

    Args:
        topology: Architecture topology.
        input_res: Square input resolution in pixels.
        stride: First-projection stride per axis; defaults to (4, 4).
        dilation: First-projection dilation per axis; defaults to (1, 1).

    Raises:
        TopologyError: If the input is empty or the dilated first kernel is
            wider than the input.
    """
    stride = tuple(stride or (STAGE_STRIDES[0], STAGE_STRIDES[0]))
    dilation = tuple(dilation or (1, 1))
    extent = max(kernel_extent(topology.kernels[0], d) for d in dilation)
    if input_res < 1 or extent > input_res:
        raise TopologyError(
            f"First kernel extent {extent} (dilation {dilation}) does not fit a {input_res}px input"
        )
    grid = (conv_output_size(input_res, stride[0]), conv_output_size(input_res, stride[1]))
    grids = [grid]
    for i in range(1, NUM_STAGES):
        grid = tuple(conv_output_size(side, STAGE_STRIDES[i]) for side in grid)
        grids.append(grid)
    return grids


def projection_flops(grid: Grid, kernel: int, in_channels: int, out_channels: int) -> int:
    return grid[0] * grid[1] * kernel * kernel * in_channels * out_channels


def attention_flops(grid: Grid, dim: int, split: int) -> int:
    """QKV, attention matrix, weighted sum and output projection MACs."""
    (windows_h, windows_w), (window_h, window_w) = window_layout(grid, split)
    padded_tokens = windows_h * window_h * windows_w * window_w
    per_window = window_h * window_w
    linear = padded_tokens * 4 * dim * dim
    quadratic = windows_h * windows_w * 2 * per_window * per_window * dim
    return linear + quadratic


def ffn_flops(tokens: int, dim: int, expansion: int) -> int:
    return tokens * 2 * expansion * dim * dim


def count_flops_for(
    topology: TopologySpec,
    scale: ScaleSpec,
    input_res: int,
    stride: Optional[Grid] = None,
    dilation: Optional[Grid] = None,
) -> int:
    """Multiply-accumulates of one forward pass of one image."""
    grids = stage_grids(topology, input_res, stride, dilation)
    widths = scale.stage_widths
    total = 0
    in_channels = 3
    for i, grid in enumerate(grids):
        dim = widths[i]
        tokens = grid[0] * grid[1]
        total += projection_flops(grid, topology.kernels[i], in_channels, dim)
        block = attention_flops(grid, dim, topology.stage_splits[i])
        block += ffn_flops(tokens, dim, topology.expansions[i])
        total += scale.depths[i] * block
        in_channels = dim
    return int(total)


def count_params_for(topology: TopologySpec, scale: ScaleSpec) -> int:
    """Exact parameter count, biases and LayerNorm affine terms included."""
    total = 0
    in_channels = 3
    for i, dim in enumerate(scale.stage_widths):
        kernel = topology.kernels[i]
        expansion = topology.expansions[i]
        total += kernel * kernel * in_channels * dim + dim  # projection
        total += 2 * dim  # projection norm
        block = (4 + 2 * expansion) * dim * dim + (9 + expansion) * dim
        total += scale.depths[i] * block
        in_channels = dim
    return int(total)
