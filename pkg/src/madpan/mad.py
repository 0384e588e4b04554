"""Merged-attention routing for joint diffusion.

A merge schedule decides, per (denoising step, attention layer), whether
attention runs once over the merged canvas or independently per view. Step
indices count from the noisiest step: "the first tau steps" means
step_index in [0, tau).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import torch

from .tiling import ViewStack, merge, split

STAGES = ("down", "mid", "up")

STAGE_PRESETS: dict[str, frozenset[str]] = {
    "all": frozenset(STAGES),
    "down": frozenset({"down"}),
    "mid": frozenset({"mid"}),
    "up": frozenset({"up"}),
    "none": frozenset(),
}

# attend(tokens (N, C), context) -> (N, C)
AttendFn = Callable[[torch.Tensor, Optional[object]], torch.Tensor]


class ScheduleError(ValueError):
    pass


class TokenBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class MergeSchedule:
    """tau initial steps of merged attention, restricted to a stage subset."""

    tau: int
    total_steps: int
    stages: frozenset = frozenset(STAGES)
    layer_overrides: Optional[Mapping[int, bool]] = None

    def __post_init__(self):
        if not 0 <= self.tau <= self.total_steps:
            raise ScheduleError(
                f"tau must be in [0, {self.total_steps}], got {self.tau}"
            )
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ScheduleError(f"unknown stages: {sorted(unknown)}")

    @classmethod
    def preset(cls, name: str, tau: int, total_steps: int) -> "MergeSchedule":
        if name not in STAGE_PRESETS:
            raise ScheduleError(f"unknown stage preset {name!r}")
        return cls(tau=tau, total_steps=total_steps, stages=STAGE_PRESETS[name])

    @classmethod
    def never(cls, total_steps: int) -> "MergeSchedule":
        return cls(tau=0, total_steps=total_steps, stages=frozenset())

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "total_steps": self.total_steps,
            "stages": sorted(self.stages),
            "layer_overrides": dict(self.layer_overrides) if self.layer_overrides else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSchedule":
        overrides = d.get("layer_overrides")
        return cls(
            tau=d["tau"],
            total_steps=d["total_steps"],
            stages=frozenset(d["stages"]),
            layer_overrides={int(k): v for k, v in overrides.items()} if overrides else None,
        )


def is_merged(schedule: MergeSchedule, step_index: int, layer) -> bool:
    """True iff attention at `layer` runs on the merged canvas at this step."""
    if not 0 <= step_index < schedule.total_steps:
        raise ScheduleError(
            f"step_index {step_index} outside [0, {schedule.total_steps})"
        )
    if step_index >= schedule.tau:
        return False
    if schedule.layer_overrides is not None and layer.layer_id in schedule.layer_overrides:
        return schedule.layer_overrides[layer.layer_id]
    return layer.stage in schedule.stages


def _to_tokens(canvas: torch.Tensor) -> torch.Tensor:
    # (C, H, W) -> (H*W, C), row-major over the spatial grid
    c = canvas.shape[0]
    return canvas.permute(1, 2, 0).reshape(-1, c)


def _from_tokens(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.reshape(h, w, -1).permute(2, 0, 1)


def mad_attention(
    stack: ViewStack,
    attend: AttendFn,
    context=None,
    token_cap: int | None = None,
) -> ViewStack:
    """Merge the views, attend once over the merged canvas, split back.

    Output views agree on overlapping cells by construction. Merged
    self-attention is quadratic in canvas tokens, hence the configurable cap.
    """
    canvas = merge(stack)
    h, w = stack.layout.canvas_shape
    if token_cap is not None and h * w > token_cap:
        raise TokenBudgetError(
            f"merged canvas has {h * w} tokens, exceeding the cap of {token_cap}; "
            f"raise the cap or restrict the merge schedule"
        )
    tokens = _to_tokens(canvas)
    attended = attend(tokens, context)
    return split(_from_tokens(attended, h, w), stack.layout)


def per_view_attention(stack: ViewStack, attend: AttendFn, context=None) -> ViewStack:
    views = []
    for view in stack.views:
        h, w = view.shape[-2:]
        views.append(_from_tokens(attend(_to_tokens(view), context), h, w))
    return ViewStack(views=views, layout=stack.layout)


def route_attention(
    schedule: MergeSchedule,
    step_index: int,
    layer,
    stack: ViewStack,
    attend: AttendFn,
    context=None,
    token_cap: int | None = None,
) -> ViewStack:
    """Dispatch one attention layer to the merged or per-view path."""
    if is_merged(schedule, step_index, layer):
        return mad_attention(stack, attend, context, token_cap=token_cap)
    return per_view_attention(stack, attend, context)
