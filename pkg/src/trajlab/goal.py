"""Heat-map goal prediction: rasterization, grid predictor, goal selection.

World coordinates are meters; grids map world points to pixel centers through
an affine GridSpec. The predictor is a small encoder-decoder convnet with
skip connections that turns stacked history heat-maps plus the semantic grid
into per-frame future heat-maps; the last channel is the goal distribution.
Goal selection draws diverse goals categorically (optionally oversampled and
clustered, the test-time sampling trick) and takes the argmax pixel as the
common goal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nncore import Parameter, Tensor, concat, conv2d, uniform_init, upsample2x


@dataclass(frozen=True)
class GridSpec:
    H: int
    W: int
    origin: tuple[float, float]  # world coords of pixel (0, 0) center
    resolution: float  # meters per pixel

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    def world_to_pixel(self, pos) -> tuple[float, float]:
        """Continuous (row, col) pixel coordinates of a world point."""
        x, y = np.asarray(pos, dtype=np.float64)
        col = (x - self.origin[0]) / self.resolution
        row = (y - self.origin[1]) / self.resolution
        return row, col

    def pixel_to_world(self, row, col) -> np.ndarray:
        return np.array([self.origin[0] + col * self.resolution,
                         self.origin[1] + row * self.resolution])

    def contains(self, pos) -> bool:
        row, col = self.world_to_pixel(pos)
        return -0.5 <= row <= self.H - 0.5 and -0.5 <= col <= self.W - 0.5


@dataclass
class HeatMapStack:
    grid: GridSpec
    channels: np.ndarray  # (T, H, W)
    normalized: bool = False

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3:
            raise ValueError("channels must be (T, H, W)")
        if not np.all(np.isfinite(self.channels)) or np.any(self.channels < 0):
            raise ValueError("heat-map values must be finite and non-negative")
        if self.normalized:
            sums = self.channels.sum(axis=(1, 2))
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise ValueError("normalized stack channels must sum to 1")


@dataclass
class SemanticGrid:
    grid: GridSpec
    channels: np.ndarray  # (C, H, W) class scores in [0, 1]

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] < 1:
            raise ValueError("semantic grid needs at least one channel")


@dataclass
class GoalSet:
    diverse: np.ndarray  # (N, 2) world coords
    common: np.ndarray  # (2,) world coords


def rasterize_gaussian(pos, grid: GridSpec, sigma_px: float) -> np.ndarray:
    """Isotropic Gaussian centred on `pos`, evaluated at pixel centers, sum 1."""
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    if not grid.contains(pos):
        raise ValueError(f"position {pos} outside grid extent")
    return rasterize_points(np.asarray(pos, dtype=np.float64)[None], grid, sigma_px)[0]


def rasterize_points(points: np.ndarray, grid: GridSpec, sigma_px: float) -> np.ndarray:
    """Vectorized rasterization: (M, 2) world points -> (M, H, W), each sum 1."""
    rows = (points[:, 1] - grid.origin[1]) / grid.resolution
    cols = (points[:, 0] - grid.origin[0]) / grid.resolution
    rr = np.arange(grid.H)[None, :, None]
    cc = np.arange(grid.W)[None, None, :]
    d2 = (rr - rows[:, None, None]) ** 2 + (cc - cols[:, None, None]) ** 2
    maps = np.exp(-0.5 * d2 / sigma_px ** 2)
    return maps / maps.sum(axis=(1, 2), keepdims=True)


class GoalNet:
    """Two-down / two-up convnet with skip connections; logistic pixel outputs.

    Two normalized coordinate channels are appended internally so the net can
    express absolute position preferences (goal anchors are scene-fixed)."""

    def __init__(self, in_channels: int, t_f: int = 12, base: int = 8,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.t_f = t_f

        def conv_params(cin, cout):
            w = Parameter(uniform_init(rng, (cout, cin, 3, 3), cin * 9))
            b = Parameter(np.zeros(cout))
            return w, b

        self.enc1 = conv_params(in_channels + 2, base)
        self.enc2 = conv_params(base, 2 * base)
        self.enc3 = conv_params(2 * base, 2 * base)
        self.dec2 = conv_params(4 * base, 2 * base)
        self.dec1 = conv_params(3 * base, base)
        self.out = conv_params(base, t_f)

    def forward_t(self, x: Tensor) -> Tensor:
        """(B, C_in, H, W) -> logits (B, t_f, H, W)."""
        b, _, h, w = x.data.shape
        rr, cc = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
                             indexing="ij")
        coords = np.broadcast_to(np.stack([rr, cc]), (b, 2, h, w))
        x = concat([x, Tensor(coords)], axis=1)
        e1 = conv2d(x, *self.enc1).relu()
        e2 = conv2d(e1, *self.enc2, stride=2).relu()
        e3 = conv2d(e2, *self.enc3, stride=2).relu()
        d2 = conv2d(concat([upsample2x(e3), e2], axis=1), *self.dec2).relu()
        d1 = conv2d(concat([upsample2x(d2), e1], axis=1), *self.dec1).relu()
        return conv2d(d1, *self.out)

    def parameters(self) -> dict:
        out = {}
        for name in ("enc1", "enc2", "enc3", "dec2", "dec1", "out"):
            w, b = getattr(self, name)
            out[f"goal.{name}.w"] = w
            out[f"goal.{name}.b"] = b
        return out


def predict_heatmaps(sem: SemanticGrid, hist: HeatMapStack, net: GoalNet) -> HeatMapStack:
    """Future heat-maps from the semantic grid and stacked history maps."""
    if sem.grid != hist.grid:
        raise ValueError("semantic grid and history stack use different grids")
    x = np.concatenate([hist.channels, sem.channels], axis=0)[None]
    if x.shape[1] != net.in_channels:
        raise ValueError(f"predictor expects {net.in_channels} input channels, got {x.shape[1]}")
    logits = net.forward_t(Tensor(x)).data[0]
    return HeatMapStack(hist.grid, 1.0 / (1.0 + np.exp(-logits)))


# -- goal selection --


@dataclass(frozen=True)
class TTSTConfig:
    n_samples: int = 1000
    kmeans_iters: int = 20


def _kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means with seeded farthest-point initialization; returns (k, 2) centers."""
    first = int(rng.integers(len(points)))
    centers = [points[first]]
    for _ in range(k - 1):
        d2 = np.min([np.sum((points - c) ** 2, axis=1) for c in centers], axis=0)
        centers.append(points[int(np.argmax(d2))])
    centers = np.array(centers)
    for _ in range(iters):
        d2 = np.sum((points[:, None, :] - centers[None]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def select_goals(goal_map: np.ndarray, grid: GridSpec, N: int,
                 ttst: TTSTConfig | None = None,
                 rng: np.random.Generator | None = None) -> GoalSet:
    """Common goal = argmax pixel (lowest row-major index on ties); diverse
    goals = N categorical pixel samples, or cluster centers of an oversampled
    draw when the test-time trick is enabled."""
    rng = rng if rng is not None else np.random.default_rng(0)
    goal_map = np.asarray(goal_map, dtype=np.float64)
    total = goal_map.sum()
    if total <= 0:
        raise ValueError("degenerate goal map (sum 0)")
    p = (goal_map / total).ravel()
    flat_argmax = int(np.argmax(goal_map))
    common = grid.pixel_to_world(flat_argmax // grid.W, flat_argmax % grid.W)

    n_draw = N
    if ttst is not None:
        if ttst.n_samples < N:
            raise ValueError("TTST sample count must be >= N")
        n_draw = ttst.n_samples
    idx = rng.choice(p.size, size=n_draw, p=p)
    pts = np.stack([grid.pixel_to_world(i // grid.W, i % grid.W) for i in idx])
    if ttst is not None and n_draw > N:
        diverse = _kmeans(pts, N, ttst.kmeans_iters, rng)
    else:
        diverse = pts[:N]
    return GoalSet(diverse=diverse, common=common)


# -- semantic grid file format --

_GRID_MAGIC = b"TRAJGRID"
_GRID_VERSION = 1


def save_semantic_grid(path, sem: SemanticGrid) -> None:
    """Header line `TRAJGRID 1 H W C ox oy res` then little-endian float32
    payload in channel/row-major order."""
    c = sem.channels.shape[0]
    header = (f"{_GRID_MAGIC.decode()} {_GRID_VERSION} {sem.grid.H} {sem.grid.W} {c} "
              f"{sem.grid.origin[0]!r} {sem.grid.origin[1]!r} {sem.grid.resolution!r}\n")
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(sem.channels.astype("<f4").tobytes())


def load_semantic_grid(path) -> SemanticGrid:
    with open(path, "rb") as f:
        header = f.readline().decode().split()
        if header[0] != _GRID_MAGIC.decode() or int(header[1]) != _GRID_VERSION:
            raise ValueError(f"{path}: not a recognized semantic grid file")
        h, w, c = int(header[2]), int(header[3]), int(header[4])
        ox, oy, res = float(header[5]), float(header[6]), float(header[7])
        payload = np.frombuffer(f.read(), dtype="<f4")
        if payload.size != c * h * w:
            raise ValueError(f"{path}: payload size {payload.size} != {c}*{h}*{w}")
    grid = GridSpec(h, w, (ox, oy), res)
    return SemanticGrid(grid, payload.reshape(c, h, w).astype(np.float64))
