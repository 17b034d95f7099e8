"""Grad-CAM attribution for stage heads, usable inside the training loop.

The backward pass runs through `torch.autograd.grad`, which never touches the
parameter `.grad` accumulators, so attribution is isolated from the
optimizer's view of the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidClass, NoGradientPath
from .models import StageOutput


@dataclass
class GradCamMap:
    values: torch.Tensor        # N, H, W, non-negative
    target_class: torch.Tensor  # N
    source_stage: int


def _as_class_tensor(target_class, batch: int, num_classes: int) -> torch.Tensor:
    target = torch.as_tensor(target_class, dtype=torch.long)
    if target.ndim == 0:
        target = target.expand(batch).clone()
    if target.shape != (batch,):
        raise InvalidClass(f"target_class must have shape ({batch},), got "
                           f"{tuple(target.shape)}")
    if target.min() < 0 or target.max() >= num_classes:
        raise InvalidClass(
            f"target_class outside [0, {num_classes}): "
            f"min {int(target.min())}, max {int(target.max())}")
    return target


def grad_cam(stage_output: StageOutput, target_class) -> GradCamMap:
    """Gradient-weighted class activation map w.r.t. the stage's input.

    Channel weights are the spatial means of d logit[target] / d input; the
    weighted channel sum is rectified and returned without renormalization.
    """
    fmap = stage_output.stage_input
    logits = stage_output.logits
    if logits.grad_fn is None:
        raise NoGradientPath("stage logits carry no autograd graph")
    if fmap.grad_fn is None and not fmap.requires_grad:
        raise NoGradientPath("stage input is detached from the autograd graph")
    n, num_classes = logits.shape
    target = _as_class_tensor(target_class, n, num_classes).to(logits.device)
    selected = logits.gather(1, target.view(-1, 1)).sum()
    grads, = torch.autograd.grad(selected, fmap, retain_graph=True)
    alpha = grads.mean(dim=(2, 3))  # N, C
    cam = torch.relu((alpha[:, :, None, None] * fmap).sum(dim=1))
    return GradCamMap(values=cam, target_class=target,
                      source_stage=stage_output.stage_index)


def detach_map(g: GradCamMap) -> GradCamMap:
    """Same values, no autograd linkage; masking built on it cannot feed back."""
    return GradCamMap(values=g.values.detach(),
                      target_class=g.target_class,
                      source_stage=g.source_stage)
