"""Block ranking of attribution maps and feature-level mixing strategies.

All operations are pure functions of their inputs plus an explicit numpy
generator; masks produced here never carry an autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import GridMismatch, KOutOfRange, NoNegativeAvailable, ShapeMismatch
from .gradcam import GradCamMap


@dataclass(frozen=True)
class BlockGrid:
    """Disjoint tiling of an H x W map into blocks of block_h x block_w cells."""

    block_h: int
    block_w: int
    height: int
    width: int

    def __post_init__(self):
        if self.block_h <= 0 or self.block_w <= 0:
            raise GridMismatch("block dimensions must be positive")
        if self.height % self.block_h or self.width % self.block_w:
            raise GridMismatch(
                f"map {self.height}x{self.width} is not an integer multiple of "
                f"blocks {self.block_h}x{self.block_w}")

    @property
    def rows(self) -> int:
        return self.height // self.block_h

    @property
    def cols(self) -> int:
        return self.width // self.block_w

    @property
    def num_blocks(self) -> int:
        return self.rows * self.cols

    @property
    def cells_per_block(self) -> int:
        return self.block_h * self.block_w

    def block_slices(self, i: int) -> tuple[slice, slice]:
        """Row-major block index -> (row slice, col slice) in map cells."""
        r, c = divmod(i, self.cols)
        return (slice(r * self.block_h, (r + 1) * self.block_h),
                slice(c * self.block_w, (c + 1) * self.block_w))


@dataclass
class BlockMask:
    values: torch.Tensor  # N, H, W with entries in {0, 1}
    k: int
    grid: BlockGrid


def _map_values(g) -> torch.Tensor:
    values = g.values if isinstance(g, GradCamMap) else g
    if values.ndim != 3:
        raise GridMismatch(f"expected an N x H x W map, got shape {tuple(values.shape)}")
    return values


def block_sums(g, grid: BlockGrid) -> torch.Tensor:
    """Per-sample row-major block sums, shape (N, num_blocks)."""
    values = _map_values(g)
    n, h, w = values.shape
    if (h, w) != (grid.height, grid.width):
        raise GridMismatch(f"map {h}x{w} does not match grid "
                           f"{grid.height}x{grid.width}")
    blocked = values.reshape(n, grid.rows, grid.block_h, grid.cols, grid.block_w)
    return blocked.sum(dim=(2, 4)).reshape(n, grid.num_blocks)


def mask_from_block_indices(block_idx: torch.Tensor, grid: BlockGrid,
                            dtype=torch.float32) -> torch.Tensor:
    """Mask that is 0 inside the given blocks, 1 elsewhere. block_idx: (N, K)."""
    n = block_idx.shape[0]
    flat = torch.ones(n, grid.num_blocks, dtype=dtype)
    if block_idx.shape[1]:
        flat.scatter_(1, block_idx.long(), 0.0)
    mask = flat.reshape(n, grid.rows, grid.cols)
    mask = mask.repeat_interleave(grid.block_h, dim=1)
    return mask.repeat_interleave(grid.block_w, dim=2)


def top_k_blocks(g, grid: BlockGrid, k: int) -> torch.Tensor:
    """Indices of the K largest-sum blocks, ties going to the smaller index."""
    if not 0 <= k <= grid.num_blocks:
        raise KOutOfRange(f"K={k} outside [0, {grid.num_blocks}]")
    sums = block_sums(g, grid)
    order = torch.argsort(sums, dim=1, descending=True, stable=True)
    return order[:, :k]


def block_ranking(g, grid: BlockGrid, k: int) -> BlockMask:
    """Zero out the K blocks with the largest attribution sums."""
    values = _map_values(g)
    top = top_k_blocks(values, grid, k)
    mask = mask_from_block_indices(top, grid, dtype=values.dtype)
    return BlockMask(values=mask.detach(), k=k, grid=grid)


def select_negative(pids: np.ndarray, anchor: int, rng: np.random.Generator) -> int:
    """Uniformly random in-batch index with a label different from the anchor's."""
    pids = np.asarray(pids)
    candidates = np.flatnonzero(pids != pids[anchor])
    if candidates.size == 0:
        raise NoNegativeAvailable(f"no sample with label != {pids[anchor]}")
    return int(candidates[int(rng.integers(candidates.size))])


def hard_mix(f_a: torch.Tensor, f_n: torch.Tensor, m: BlockMask) -> torch.Tensor:
    """m * f_a + (1 - m) * f_n with the single-channel mask broadcast over C.

    Labels are deliberately not touched: the mixture keeps the anchor's label.
    """
    if f_a.shape != f_n.shape:
        raise ShapeMismatch(f"anchor {tuple(f_a.shape)} vs negative "
                            f"{tuple(f_n.shape)}")
    mask = m.values.detach()
    if mask.shape[0] != f_a.shape[0] or mask.shape[-2:] != f_a.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs features "
                            f"{tuple(f_a.shape)}")
    mask = mask.to(f_a.dtype).unsqueeze(1)
    return mask * f_a + (1.0 - mask) * f_n


@dataclass(frozen=True)
class MixStrategy:
    kind: str  # a_hard_mix | cutout | cutmix_feature | a_cutmix_feature | none
    k: int = 0


@dataclass
class LabelMix:
    """Per-sample label-mixing weights: lam * label_a + (1 - lam) * label_b."""

    label_a: torch.Tensor  # N
    label_b: torch.Tensor  # N
    lam: torch.Tensor      # N, kept-area fraction


@dataclass
class MixOutcome:
    features: torch.Tensor
    mask: torch.Tensor | None = None       # N, H, W mask that was applied
    label_mix: LabelMix | None = None
    donors: np.ndarray | None = None


def _draw_donors(labels: np.ndarray, rng: np.random.Generator,
                 negatives_only: bool) -> np.ndarray:
    n = len(labels)
    donors = np.empty(n, dtype=np.int64)
    for i in range(n):
        if negatives_only:
            donors[i] = select_negative(labels, i, rng)
        else:
            j = int(rng.integers(n - 1))
            donors[i] = j if j < i else j + 1
    return donors


def _random_block_rects(grid: BlockGrid, n: int,
                        rng: np.random.Generator) -> torch.Tensor:
    """Random contiguous block rectangles; returns (N, max_k) padded indices.

    Each rectangle covers rh x rw grid blocks at a random position; unused
    slots repeat the first index so that scatter stays idempotent.
    """
    per_sample = []
    for _ in range(n):
        rh = int(rng.integers(1, grid.rows + 1))
        rw = int(rng.integers(1, grid.cols + 1))
        top = int(rng.integers(0, grid.rows - rh + 1))
        left = int(rng.integers(0, grid.cols - rw + 1))
        idx = [(top + r) * grid.cols + (left + c)
               for r in range(rh) for c in range(rw)]
        per_sample.append(idx)
    width = max(len(idx) for idx in per_sample)
    padded = [idx + [idx[0]] * (width - len(idx)) for idx in per_sample]
    return torch.as_tensor(padded, dtype=torch.long)


def apply_strategy(strategy: MixStrategy, features: torch.Tensor,
                   labels: np.ndarray, g_prev, grid: BlockGrid,
                   rng: np.random.Generator,
                   donor_indices: np.ndarray | None = None) -> MixOutcome:
    """Build the next stage's input feature map from the previous stage's map.

    `labels` drive negative selection and label mixing; `g_prev` is the
    (detached) attribution map of the previous stage, may be None for the
    strategies that can run unguided.
    """
    if strategy.kind == "none":
        return MixOutcome(features=features)

    labels = np.asarray(labels)
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    n = features.shape[0]

    if strategy.kind == "a_hard_mix":
        mask = block_ranking(g_prev, grid, strategy.k)
        donors = donor_indices if donor_indices is not None else \
            _draw_donors(labels, rng, negatives_only=True)
        mixed = hard_mix(features, features[donors], mask)
        return MixOutcome(features=mixed, mask=mask.values,
                          donors=np.asarray(donors))

    if strategy.kind == "cutout":
        if g_prev is not None:
            mask = block_ranking(g_prev, grid, strategy.k)
        else:
            picks = np.stack([rng.choice(grid.num_blocks, size=strategy.k,
                                         replace=False) for _ in range(n)])
            mask = BlockMask(mask_from_block_indices(
                torch.as_tensor(picks), grid, dtype=features.dtype),
                k=strategy.k, grid=grid)
        mixed = hard_mix(features, torch.zeros_like(features), mask)
        return MixOutcome(features=mixed, mask=mask.values)

    if strategy.kind == "cutmix_feature":
        donors = donor_indices if donor_indices is not None else \
            _draw_donors(labels, rng, negatives_only=False)
        rects = _random_block_rects(grid, n, rng)
        mask_t = mask_from_block_indices(rects, grid, dtype=features.dtype)
        mask = BlockMask(values=mask_t, k=-1, grid=grid)
        mixed = hard_mix(features, features[donors], mask)
        kept = mask_t.reshape(n, -1).sum(dim=1) / (grid.height * grid.width)
        label_mix = LabelMix(label_a=labels_t, label_b=labels_t[donors],
                             lam=kept.detach())
        return MixOutcome(features=mixed, mask=mask_t, label_mix=label_mix,
                          donors=np.asarray(donors))

    if strategy.kind == "a_cutmix_feature":
        donors = donor_indices if donor_indices is not None else \
            _draw_donors(labels, rng, negatives_only=False)
        full = block_ranking(g_prev, grid, strategy.k)
        donor_mask = BlockMask(values=full.values[donors], k=strategy.k, grid=grid)
        mixed = hard_mix(features, features[donors], donor_mask)
        kept_frac = 1.0 - strategy.k * grid.cells_per_block / (grid.height * grid.width)
        lam = torch.full((n,), kept_frac, dtype=torch.float64)
        label_mix = LabelMix(label_a=labels_t, label_b=labels_t[donors], lam=lam)
        return MixOutcome(features=mixed, mask=donor_mask.values,
                          label_mix=label_mix, donors=np.asarray(donors))

    raise ValueError(f"unknown mix strategy kind {strategy.kind!r}")
