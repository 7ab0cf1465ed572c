"""Attention masks for the decoders and the refinement modules.

``allow[i, j]`` is True when row ``i`` may attend to column ``j``.

In the decoders, queries built from the same track never see each other, so
the self-attention that normally suppresses duplicate detections does not
make them compete. The refinement modules use the complementary pattern:
tracking rows attend only within their own track.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import QueryBatch


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray

    def __post_init__(self):
        allow = np.asarray(self.allow, dtype=bool)
        if allow.ndim != 2 or allow.shape[0] != allow.shape[1]:
            raise ValueError(f"mask must be square, got {allow.shape}")
        if not np.diag(allow).all():
            raise ValueError("mask diagonal must allow self-attention")
        object.__setattr__(self, "allow", allow)

    @property
    def shape(self):
        return self.allow.shape

    def blocked_pairs(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(~self.allow))}


def decoder_mask(batch: QueryBatch) -> AttentionMask:
    return decoder_mask_from_groups(batch.group_id, batch.is_tracking)


def decoder_mask_from_groups(group_id, is_tracking) -> AttentionMask:
    group_id = np.asarray(group_id)
    is_tracking = np.asarray(is_tracking, dtype=bool)
    same = group_id[:, None] == group_id[None, :]
    both = is_tracking[:, None] & is_tracking[None, :]
    allow = ~(same & both)
    np.fill_diagonal(allow, True)
    return AttentionMask(allow)


def irm_mask(group_id) -> AttentionMask:
    """Same-track-only attention over tracking rows."""
    group_id = np.asarray(group_id).reshape(-1)
    return AttentionMask(group_id[:, None] == group_id[None, :])
