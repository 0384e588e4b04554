"""Overlapping view layouts over a latent canvas, with split and merge primitives.

Latents are torch tensors shaped (C, H, W). A layout is a list of (row, col)
origins of L-by-L windows; merge averages every canvas cell over the views
covering it, so merge(split(x)) == x for any layout with full coverage.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class PanoramaSpec:
    """Geometry of a panorama: pixel dims, decoder scale, and view tiling."""

    image_height: int
    image_width: int
    latent_scale: int
    latent_channels: int
    view_size: int
    stride: int

    def __post_init__(self):
        if self.latent_scale < 1:
            raise TilingError(f"latent_scale must be >= 1, got {self.latent_scale}")
        if self.image_height % self.latent_scale or self.image_width % self.latent_scale:
            raise TilingError(
                f"image dims ({self.image_height}x{self.image_width}) must be "
                f"divisible by latent_scale {self.latent_scale}"
            )
        if self.view_size < 1:
            raise TilingError(f"view_size must be >= 1, got {self.view_size}")
        if not 1 <= self.stride <= self.view_size:
            raise TilingError(
                f"stride must be in [1, view_size], got {self.stride} with L={self.view_size}"
            )
        if self.latent_channels < 1:
            raise TilingError("latent_channels must be >= 1")

    @property
    def latent_height(self) -> int:
        return self.image_height // self.latent_scale

    @property
    def latent_width(self) -> int:
        return self.image_width // self.latent_scale

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.latent_height, self.latent_width)


@dataclass(frozen=True)
class ViewLayout:
    """Origins of L-by-L views over a canvas, sorted lexicographically."""

    origins: tuple[tuple[int, int], ...]
    view_size: int
    canvas_shape: tuple[int, int]
    clamped: bool = False

    def __post_init__(self):
        if not self.origins:
            raise TilingError("layout needs at least one view")
        if list(self.origins) != sorted(set(self.origins)):
            raise TilingError("origins must be sorted and unique")
        h, w = self.canvas_shape
        L = self.view_size
        for r, c in self.origins:
            if r < 0 or c < 0 or r + L > h or c + L > w:
                raise TilingError(f"view at ({r},{c}) exceeds canvas {self.canvas_shape}")

    def __len__(self) -> int:
        return len(self.origins)

    def scaled(self, factor: int) -> "ViewLayout":
        """Layout at a feature resolution downsampled by `factor`."""
        if factor == 1:
            return self
        h, w = self.canvas_shape
        if h % factor or w % factor or self.view_size % factor:
            raise TilingError(f"canvas/view size not divisible by scale factor {factor}")
        for r, c in self.origins:
            if r % factor or c % factor:
                raise TilingError(f"origin ({r},{c}) not divisible by scale factor {factor}")
        return ViewLayout(
            origins=tuple((r // factor, c // factor) for r, c in self.origins),
            view_size=self.view_size // factor,
            canvas_shape=(h // factor, w // factor),
            clamped=self.clamped,
        )

    def to_dict(self) -> dict:
        return {
            "origins": [list(o) for o in self.origins],
            "view_size": self.view_size,
            "canvas_shape": list(self.canvas_shape),
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewLayout":
        return cls(
            origins=tuple(tuple(o) for o in d["origins"]),
            view_size=d["view_size"],
            canvas_shape=tuple(d["canvas_shape"]),
            clamped=d.get("clamped", False),
        )

    @classmethod
    def single(cls, canvas_shape: tuple[int, int]) -> "ViewLayout":
        """Degenerate layout: one view covering a square canvas dimension-wise."""
        h, w = canvas_shape
        if h != w:
            raise TilingError("single-view layout requires a square canvas")
        return cls(origins=((0, 0),), view_size=h, canvas_shape=canvas_shape)


@dataclass
class ViewStack:
    """Materialized views (each (C, L, L)) plus the layout that produced them."""

    views: list[torch.Tensor]
    layout: ViewLayout

    def __post_init__(self):
        if len(self.views) != len(self.layout):
            raise TilingError(
                f"{len(self.views)} views for {len(self.layout)} layout origins"
            )
        shapes = {tuple(v.shape) for v in self.views}
        if len(shapes) > 1:
            raise TilingError(f"views have mixed shapes: {shapes}")


def _axis_positions(dim: int, size: int, stride: int, mode: str) -> tuple[list[int], bool]:
    if size > dim:
        raise TilingError(f"view size {size} exceeds canvas dim {dim}")
    if stride <= 0:
        raise TilingError(f"stride must be positive, got {stride}")
    positions = list(range(0, dim - size + 1, stride))
    clamped = False
    if positions[-1] != dim - size:
        if mode == "strict":
            raise TilingError(
                f"(dim - L) = {dim - size} not divisible by stride {stride} in strict mode"
            )
        # clamp mode: one extra view flushed to the canvas edge
        positions.append(dim - size)
        clamped = True
    return positions, clamped


def plan_views(spec: PanoramaSpec, orientation: str, mode: str = "clamp") -> ViewLayout:
    """Compute the overlapping-view layout for a panorama.

    orientation: "horizontal" (views slide along width, L == latent height),
    "vertical" (views slide along height), or "grid" (tile both axes).
    mode: "clamp" appends a final edge-flushed view when the long dimension is
    not stride-divisible; "strict" rejects such configs.
    """
    if mode not in ("clamp", "strict"):
        raise TilingError(f"unknown tiling mode {mode!r}")
    h, w = spec.latent_shape
    L = spec.view_size
    if orientation == "horizontal" and L != h:
        raise TilingError(f"horizontal panorama requires L == latent height ({h}), got {L}")
    if orientation == "vertical" and L != w:
        raise TilingError(f"vertical panorama requires L == latent width ({w}), got {L}")
    if orientation not in ("horizontal", "vertical", "grid"):
        raise TilingError(f"unknown orientation {orientation!r}")
    rows, clamped_r = _axis_positions(h, L, spec.stride, mode)
    cols, clamped_c = _axis_positions(w, L, spec.stride, mode)
    origins = tuple((r, c) for r in rows for c in cols)
    return ViewLayout(
        origins=origins,
        view_size=L,
        canvas_shape=(h, w),
        clamped=clamped_r or clamped_c,
    )


def split(grid: torch.Tensor, layout: ViewLayout) -> ViewStack:
    """Cut the canvas into views. Views are copies, never aliases."""
    if grid.shape[-2:] != layout.canvas_shape:
        raise TilingError(
            f"grid spatial shape {tuple(grid.shape[-2:])} != layout canvas {layout.canvas_shape}"
        )
    L = layout.view_size
    views = [grid[..., r : r + L, c : c + L].clone() for r, c in layout.origins]
    return ViewStack(views=views, layout=layout)


def overlap_counts(layout: ViewLayout) -> torch.Tensor:
    """Integer grid counting how many views cover each canvas cell."""
    counts = torch.zeros(layout.canvas_shape, dtype=torch.int64)
    L = layout.view_size
    for r, c in layout.origins:
        counts[r : r + L, c : c + L] += 1
    return counts


def merge(stack: ViewStack) -> torch.Tensor:
    """Average the views back into a single canvas.

    Deterministic order-independent reduction: sum contributions in origin
    order, then divide by the coverage counts.
    """
    if not stack.views:
        raise TilingError("cannot merge an empty stack")
    layout = stack.layout
    L = layout.view_size
    lead = stack.views[0].shape[:-2]
    acc = torch.zeros(
        (*lead, *layout.canvas_shape), dtype=stack.views[0].dtype
    )
    for view, (r, c) in zip(stack.views, layout.origins):
        acc[..., r : r + L, c : c + L] += view
    counts = overlap_counts(layout).to(acc.dtype)
    return acc / counts
