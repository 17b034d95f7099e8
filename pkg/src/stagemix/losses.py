"""Identity classification and batch-hard triplet losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import DegenerateBatch, InvalidLabel
from .mixing import LabelMix


def _smoothed_nll(log_probs: torch.Tensor, labels: torch.Tensor,
                  epsilon: float) -> torch.Tensor:
    """Per-sample cross-entropy against the epsilon-smoothed one-hot target.

    The true class receives mass 1 - eps*(C-1)/C and every other class eps/C,
    which reduces to (1-eps)*nll + (eps/C)*sum_nll.
    """
    num_classes = log_probs.shape[1]
    nll = -log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    smooth = -log_probs.sum(dim=1)
    return (1.0 - epsilon) * nll + (epsilon / num_classes) * smooth


def _check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidLabel(
            f"labels outside [0, {num_classes}): min {int(labels.min())}, "
            f"max {int(labels.max())}")
    return labels


def id_loss(logits: torch.Tensor, labels, epsilon: float = 0.1,
            label_mix: LabelMix | None = None) -> torch.Tensor:
    """Label-smoothed softmax cross-entropy, mean over the batch.

    When a LabelMix is given, each sample contributes
    lam * loss(label_a) + (1 - lam) * loss(label_b).
    """
    num_classes = logits.shape[1]
    log_probs = F.log_softmax(logits, dim=1)
    if label_mix is None:
        labels = _check_labels(labels, num_classes).to(logits.device)
        return _smoothed_nll(log_probs, labels, epsilon).mean()
    la = _check_labels(label_mix.label_a, num_classes).to(logits.device)
    lb = _check_labels(label_mix.label_b, num_classes).to(logits.device)
    lam = label_mix.lam.to(logits.dtype).to(logits.device)
    per_sample = (lam * _smoothed_nll(log_probs, la, epsilon)
                  + (1.0 - lam) * _smoothed_nll(log_probs, lb, epsilon))
    return per_sample.mean()


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    # exact differences; the matmul shortcut loses too much precision for
    # the float64 oracle comparisons
    return torch.cdist(embeddings, embeddings, p=2,
                       compute_mode="donot_use_mm_for_euclid_dist")


def triplet_loss(embeddings: torch.Tensor, labels, margin: float = 1.2) -> torch.Tensor:
    """Batch-hard triplet loss on raw Euclidean distances.

    Per anchor: the farthest same-label sample (excluding self) and the
    nearest different-label sample feed a hinge at the given margin.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device)
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise DegenerateBatch(f"labels shape {tuple(labels.shape)} vs batch {n}")
    same = labels.view(-1, 1).eq(labels.view(1, -1))
    pos_mask = same & ~torch.eye(n, dtype=torch.bool, device=embeddings.device)
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise DegenerateBatch("some anchor has no positive in the batch")
    if not bool(neg_mask.any(dim=1).all()):
        raise DegenerateBatch("some anchor has no negative in the batch")
    dist = pairwise_distances(embeddings)
    d_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    d_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return torch.relu(d_pos - d_neg + margin).mean()


def total_loss(stage_outputs, labels, epsilon: float, margin: float,
               stage_weights, label_mixes=None,
               concat_triplet: bool = False) -> tuple[torch.Tensor, dict]:
    """Weighted sum of per-stage id and triplet losses plus a breakdown.

    With concat_triplet the triplet term is mined once on the concatenation
    of all stage embeddings and added with weight 1 instead of per stage.
    """
    if label_mixes is None:
        label_mixes = [None] * len(stage_outputs)
    total = None
    stages = []
    for out, weight, mix in zip(stage_outputs, stage_weights, label_mixes):
        idl = id_loss(out.logits, labels, epsilon, mix)
        if concat_triplet:
            term = weight * idl
            stages.append({"id": float(idl), "triplet": None})
        else:
            trip = triplet_loss(out.embedding, labels, margin)
            term = weight * (idl + trip)
            stages.append({"id": float(idl), "triplet": float(trip)})
        total = term if total is None else total + term
    if concat_triplet:
        cat = torch.cat([o.embedding for o in stage_outputs], dim=1)
        trip = triplet_loss(cat, labels, margin)
        total = total + trip
        breakdown = {"stages": stages, "concat_triplet": float(trip)}
    else:
        breakdown = {"stages": stages}
    breakdown["total"] = float(total)
    return total, breakdown
