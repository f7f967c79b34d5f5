"""Translation augmentation: every training pair shifted 2 voxels along 26 directions."""
from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import replace

import numpy as np

from .errors import PreconditionError
from .volume import Volume

STEP = 2


def directions_26(step: int = STEP) -> list[tuple[int, int, int]]:
    """All offsets in {-step, 0, step}^3 except the origin, in lexicographic order."""
    return [d for d in itertools.product((-step, 0, step), repeat=3) if d != (0, 0, 0)]


def translate(volume, offset) -> Volume:
    """Shift so that ``out[p] = in[p - offset]``; exposed voxels are zero."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    offset = tuple(int(o) for o in offset)
    if len(offset) != 3 or any(abs(o) >= d for o, d in zip(offset, data.shape)):
        raise PreconditionError(f"offset {offset} must be smaller than dims {data.shape} on every axis")
    out = np.zeros_like(data)
    src, dst = [], []
    for o, d in zip(offset, data.shape):
        if o >= 0:
            src.append(slice(0, d - o))
            dst.append(slice(o, d))
        else:
            src.append(slice(-o, d))
            dst.append(slice(0, d + o))
    out[tuple(dst)] = data[tuple(src)]
    return Volume(out)


class AugmentedRecords(Sequence):
    """The 26 translated copies of each record, materialized on access.

    Item ``i`` is record ``i // 26`` shifted by ``directions_26()[i % 26]``;
    both hippocampi get the same offset and the record keeps its label.
    """

    def __init__(self, records):
        self.records = list(records)
        self.offsets = directions_26()

    def __len__(self):
        return len(self.records) * len(self.offsets)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        rec = self.records[i // len(self.offsets)]
        off = self.offsets[i % len(self.offsets)]
        return replace(
            rec,
            subject_id=f"{rec.subject_id}@{off[0]:+d}{off[1]:+d}{off[2]:+d}",
            left=translate(rec.left, off),
            right=translate(rec.right, off),
        )

    @property
    def labels(self):
        return [r.label for r in self.records for _ in self.offsets]


def augment_dataset(records) -> AugmentedRecords:
    """26 translated copies per record. Originals are not included."""
    return AugmentedRecords(records)


class TrainingSet(Sequence):
    """Originals followed by their translated copies."""

    def __init__(self, records, augment=True):
        self.originals = list(records)
        self.augmented = AugmentedRecords(self.originals) if augment else AugmentedRecords([])

    def __len__(self):
        return len(self.originals) + len(self.augmented)

    def __getitem__(self, i):
        if i < 0:
            i += len(self)
        if i < len(self.originals):
            return self.originals[i]
        return self.augmented[i - len(self.originals)]

    @property
    def labels(self):
        return [r.label for r in self.originals] + self.augmented.labels


