"""Subject feature extraction, decoupled into semantic and shape branches.

The semantic branch is the same strided-conv stack that produces the
diffusion latent (weights shared by construction); the shape branch is a
7-layer ConvNet over the stacked mask/depth/edge channels with taps
collected after layers 1, 3, 5 and 7. Each tap is fused with the semantic
feature by its own 2-layer MLP, and the fused per-tap features are what the
per-block adapters consume. ``route_taps`` assigns taps to skip-mirrored
block groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

DOWNSAMPLE = 8  # pixels per latent cell
SEM_CHANNELS = 3 * DOWNSAMPLE * DOWNSAMPLE
TAP_LAYERS = (1, 3, 5, 7)


# -- domain types -------------------------------------------------------------


@dataclass
class SubjectConditioning:
    """Subject image (background zeroed), mask, depth proxy, edge magnitude."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1], zero where mask is 0
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    depth: np.ndarray  # (H, W) float32 in [0, 1], positive exactly on mask
    edges: np.ndarray  # (H, W) float32 in [0, 1]
    bbox: tuple[int, int, int, int]  # (r0, c0, r1, c1), half-open, tight on mask

    def validate(self) -> None:
        h, w = self.mask.shape
        for name in ("depth", "edges"):
            if getattr(self, name).shape != (h, w):
                raise DimensionError(f"{name} shape {getattr(self, name).shape} != mask {h, w}")
        if self.image.shape != (h, w, 3):
            raise DimensionError(f"image shape {self.image.shape} != {(h, w, 3)}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        if np.any(self.image[self.mask == 0] != 0.0):
            raise ValueError("image must be zero outside the mask")
        rows, cols = np.nonzero(self.mask)
        tight = (rows.min(), cols.min(), rows.max() + 1, cols.max() + 1)
        if tuple(self.bbox) != tight:
            raise ValueError(f"bbox {self.bbox} is not tight (expected {tight})")


@dataclass
class SubjectFeature:
    """Fused per-tap feature tokens on the latent grid."""

    features: dict[int, T.Tensor]  # tap index -> (B, n_tokens, width)
    coords: np.ndarray  # (n_tokens, 2) latent-grid (row, col)
    grid: tuple[int, int]
    batch: int = field(default=1)


# -- semantic branch (shared with the diffusion latent path) -------------------


def _space_to_depth_kernel(c_in: int) -> np.ndarray:
    w = np.zeros((2, 2, c_in, 4 * c_in), dtype=np.float32)
    for ky in range(2):
        for kx in range(2):
            for c in range(c_in):
                w[ky, kx, c, (ky * 2 + kx) * c_in + c] = 1.0
    return w


_SEM_KERNELS = [
    T.Tensor(_space_to_depth_kernel(3)),
    T.Tensor(_space_to_depth_kernel(12)),
    T.Tensor(_space_to_depth_kernel(48)),
]


def encode_semantic(image: np.ndarray | T.Tensor) -> T.Tensor:
    """Strided-conv encoding of an image batch to the latent grid.

    Three stride-2 layers, fixed weights, zero bias; the identical map is
    used to produce the diffusion latent, so subject features live in the
    same space as the tokens they condition. Input (B, H, W, 3) with H, W
    divisible by 8; output (B, H/8, W/8, 192).
    """
    x = T.as_tensor(image)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[3] != 3:
        raise DimensionError(f"expected (B, H, W, 3) image, got {x.shape}")
    if x.shape[1] % DOWNSAMPLE or x.shape[2] % DOWNSAMPLE:
        raise DimensionError(f"image dims {x.shape[1:3]} not divisible by {DOWNSAMPLE}")
    for kernel in _SEM_KERNELS:
        x = T.conv2d(x, kernel, stride=2)
    return x


def decode_semantic(latent: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`encode_semantic` (depth-to-space, 3 levels)."""
    x = np.asarray(latent)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    for _ in range(3):
        b, h, w, c = x.shape
        x = x.reshape(b, h, w, 4, c // 4)
        x = x.reshape(b, h, w, 2, 2, c // 4)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h * 2, w * 2, c // 4)
    return x[0] if squeeze else x


def pixels_to_latent(image: np.ndarray) -> np.ndarray:
    """Diffusion latent: the shared encoder output, affinely centered to [-1, 1]."""
    return 2.0 * encode_semantic(image).data - 1.0


def latent_to_pixels(latent: np.ndarray) -> np.ndarray:
    return decode_semantic((np.asarray(latent) + 1.0) * 0.5)


# -- shape branch ---------------------------------------------------------------


class ShapeNet:
    """7-layer ConvNet over [mask, depth, edges] with multi-depth taps.

    3x3 kernels, no biases (zero input propagates to zero taps), GELU,
    strides [2, 2, 2, 1, 1, 1, 1] so layers 3+ sit on the latent grid.
    The layer-1 tap is brought to the latent grid by centered strided
    point-sampling (no interpolation).
    """

    STRIDES = (2, 2, 2, 1, 1, 1, 1)

    def __init__(self, rng: np.random.Generator, base_channels: int = 8):
        widths = [base_channels, 2 * base_channels, 4 * base_channels]
        widths += [4 * base_channels] * 4
        self.widths = widths
        self.convs = []
        c_in = 3
        for c_out, stride in zip(widths, self.STRIDES):
            self.convs.append(T.Conv2d(rng, c_in, c_out, kernel=3, stride=stride, padding=1))
            c_in = c_out

    @property
    def tap_widths(self) -> list[int]:
        return [self.widths[i - 1] for i in TAP_LAYERS]

    def __call__(self, channels: T.Tensor) -> list[T.Tensor]:
        """(B, H, W, 3) -> four taps, each (B, H/8, W/8, c_tap)."""
        if channels.ndim != 4 or channels.shape[3] != 3:
            raise DimensionError(f"shape branch wants (B, H, W, 3), got {channels.shape}")
        taps = []
        x = channels
        for i, conv in enumerate(self.convs, start=1):
            x = T.gelu(conv(x))
            if i in TAP_LAYERS:
                taps.append(x)
        # tap 1 is at H/2; sample every 4th cell, centered, to reach H/8
        taps[0] = taps[0][:, 2::4, 2::4, :]
        return taps

    def named_params(self, prefix: str):
        for i, conv in enumerate(self.convs, start=1):
            yield from conv.named_params(f"{prefix}.conv{i}")


def encode_shape(
    mask: np.ndarray, depth: np.ndarray, edges: np.ndarray, net: ShapeNet
) -> list[T.Tensor]:
    """Stack the three shape channels and run the tap ConvNet."""
    mask, depth, edges = (np.asarray(a, dtype=np.float32) for a in (mask, depth, edges))
    if mask.ndim == 2:
        mask, depth, edges = mask[None], depth[None], edges[None]
    if not (mask.shape == depth.shape == edges.shape):
        raise DimensionError(
            f"mask/depth/edges shapes differ: {mask.shape}, {depth.shape}, {edges.shape}"
        )
    stacked = T.Tensor(np.stack([mask, depth, edges], axis=-1))
    return net(stacked)


# -- fusion ----------------------------------------------------------------------


class FusionMlp:
    """Concat semantic + one tap on channels, then a 2-layer MLP to adapter width."""

    def __init__(self, rng: np.random.Generator, tap_width: int, out_width: int):
        hidden = 2 * out_width
        self.fc1 = T.Linear(rng, SEM_CHANNELS + tap_width, hidden)
        self.fc2 = T.Linear(rng, hidden, out_width)

    def __call__(self, sem: T.Tensor, tap: T.Tensor) -> T.Tensor:
        if sem.shape[:-1] != tap.shape[:-1]:
            raise DimensionError(f"semantic grid {sem.shape} vs tap grid {tap.shape}")
        joined = T.concat([sem, tap], axis=-1)
        return self.fc2(T.gelu(self.fc1(joined)))

    def named_params(self, prefix: str):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


def fuse_features(sem: T.Tensor, tap: T.Tensor, mlp: FusionMlp) -> T.Tensor:
    return mlp(sem, tap)


# -- routing ---------------------------------------------------------------------


def route_taps(num_blocks: int, num_taps: int) -> dict[int, int]:
    """Assign each 1-indexed block its tap, in skip-mirrored groups.

    Blocks split into 2*num_taps equal groups; group g and its mirror group
    (2*num_taps + 1 - g) both receive tap g.
    """
    if num_taps < 1 or num_blocks % (2 * num_taps) != 0:
        raise ConfigError(f"{num_blocks} blocks not divisible into {2 * num_taps} groups")
    group_size = num_blocks // (2 * num_taps)
    routing = {}
    for block in range(1, num_blocks + 1):
        group = (block - 1) // group_size + 1
        routing[block] = group if group <= num_taps else 2 * num_taps + 1 - group
    return routing


# -- full encoder ------------------------------------------------------------------


class SubjectEncoder:
    """Semantic + shape branches with per-tap fusion into SubjectFeature."""

    def __init__(
        self,
        rng: np.random.Generator,
        adapter_width: int = 64,
        shape_channels: int = 8,
        use_shape: bool = True,
    ):
        self.adapter_width = adapter_width
        self.use_shape = use_shape
        self.shape_net = ShapeNet(rng, shape_channels)
        self.fusions = [
            FusionMlp(rng, tap_width, adapter_width) for tap_width in self.shape_net.tap_widths
        ]

    @property
    def num_taps(self) -> int:
        return len(TAP_LAYERS)

    def encode(self, cond: SubjectConditioning | list[SubjectConditioning]) -> SubjectFeature:
        conds = cond if isinstance(cond, list) else [cond]
        image = np.stack([c.image for c in conds]).astype(np.float32)
        mask = np.stack([c.mask for c in conds]).astype(np.float32)
        depth = np.stack([c.depth for c in conds]).astype(np.float32)
        edges = np.stack([c.edges for c in conds]).astype(np.float32)

        sem = encode_semantic(image)
        if self.use_shape:
            taps = encode_shape(mask, depth, edges, self.shape_net)
        else:
            taps = [
                T.Tensor(np.zeros(sem.shape[:3] + (w,), dtype=np.float32))
                for w in self.shape_net.tap_widths
            ]
        grid = (sem.shape[1], sem.shape[2])
        n = grid[0] * grid[1]
        features = {}
        for tap_index, (tap, mlp) in enumerate(zip(taps, self.fusions), start=1):
            fused = fuse_features(sem, tap, mlp)
            features[tap_index] = T.reshape(fused, (len(conds), n, self.adapter_width))
        coords = T.latent_grid_coords(*grid)
        return SubjectFeature(features=features, coords=coords, grid=grid, batch=len(conds))

    def named_params(self, prefix: str = "encoder"):
        yield from self.shape_net.named_params(f"{prefix}.shape_net")
        for i, mlp in enumerate(self.fusions, start=1):
            yield from mlp.named_params(f"{prefix}.fusion{i}")
