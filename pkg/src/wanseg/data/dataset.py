from __future__ import annotations

from typing import Optional

import numpy as np

from wanseg.errors import ContractError


class PatchSet:
    """In-memory batch store: images (N, 3, S, S) in [0, 1], optional masks and weak labels.

    ``mask_reads`` counts accesses to ``masks`` so callers can audit that an
    adaptation run never looked at target annotations.
    """

    def __init__(self, images: np.ndarray, masks: Optional[np.ndarray] = None,
                 weak_labels: Optional[np.ndarray] = None, ids: Optional[list[str]] = None):
        n = len(images)
        if masks is not None and (len(masks) != n or masks.shape[-2:] != images.shape[-2:]):
            raise ContractError("masks must match images")
        if weak_labels is not None and len(weak_labels) != n:
            raise ContractError("weak labels must match images")
        self.images = images
        self._masks = masks
        self.weak_labels = weak_labels
        self.ids = ids if ids is not None else [f"{i:05d}" for i in range(n)]
        self.mask_reads = 0

    def __len__(self) -> int:
        return len(self.images)

    @property
    def has_masks(self) -> bool:
        return self._masks is not None

    @property
    def masks(self) -> Optional[np.ndarray]:
        self.mask_reads += 1
        return self._masks

    def without_masks(self) -> "PatchSet":
        """A copy that structurally cannot yield dense annotations."""
        return PatchSet(self.images, None, self.weak_labels, list(self.ids))

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet(self.images[idx], None if self._masks is None else self._masks[idx],
                        None if self.weak_labels is None else self.weak_labels[idx],
                        [self.ids[i] for i in idx])
