"""Cohort partitions and patch batching for the training loops."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .volume import DatasetSplit, SubjectRecord, crop, grid_origins, random_origins


def derive_seed(seed: int, *names: object) -> int:
    """Stable 63-bit seed from a parent seed and component names."""
    key = ":".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class CohortData:
    train: list[SubjectRecord]
    val: list[SubjectRecord]
    test: list[SubjectRecord]

    @classmethod
    def from_split(cls, subjects: Sequence[SubjectRecord], split: DatasetSplit) -> "CohortData":
        by_id = {s.id: s for s in subjects}
        return cls(
            train=[by_id[i] for i in split.train_ids],
            val=[by_id[i] for i in split.val_ids],
            test=[by_id[i] for i in split.test_ids],
        )


def _fit_size(size: Sequence[int], dims: Sequence[int]) -> tuple[int, int, int]:
    return tuple(min(s, d) for s, d in zip(size, dims))


def subject_patch(subject: SubjectRecord, origin, size) -> dict[str, np.ndarray]:
    return {
        "image": crop(subject.volume.data, origin, size),
        "mask": crop(subject.mask.labels, origin, size),
        "label": int(subject.class_label),
    }


def iter_batches(
    subjects: Sequence[SubjectRecord],
    patch_size: Sequence[int],
    batch_size: int,
    rng: np.random.Generator,
    patches_per_subject: int = 1,
    min_batch: int = 1,
) -> Iterator[dict[str, torch.Tensor]]:
    """Random patches from shuffled subjects, batched as ``image (B,1,d,h,w)``, ``mask``, ``label``."""
    items = []
    for idx in rng.permutation(len(subjects)):
        subj = subjects[int(idx)]
        size = _fit_size(patch_size, subj.volume.dims)
        for origin in random_origins(subj.volume.dims, size, patches_per_subject, rng):
            items.append(subject_patch(subj, origin, size))
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        if len(chunk) < min_batch:
            break
        yield collate(chunk)


def collate(items: Sequence[dict]) -> dict[str, torch.Tensor]:
    return {
        "image": torch.from_numpy(np.stack([i["image"] for i in items]).astype(np.float32))[:, None],
        "mask": torch.from_numpy(np.stack([i["mask"] for i in items]).astype(np.int64)),
        "label": torch.tensor([i["label"] for i in items], dtype=torch.long),
    }


def grid_patches(subject: SubjectRecord, patch_size: Sequence[int]) -> list[tuple[tuple[int, int, int], dict]]:
    size = _fit_size(patch_size, subject.volume.dims)
    return [(o, subject_patch(subject, o, size)) for o in grid_origins(subject.volume.dims, size)]
