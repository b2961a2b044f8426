"""Train/test splitting, patch extraction, D4 augmentation and batch scheduling.

Coordinates are ``(x, y)`` = (column, row) throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, ValidationError
from .hsdata import HyperCube, LabelMap

PATCH_SIZE = 5
N_TRANSFORMS = 8


@dataclass
class Split:
    """Per-class train/test pixel coordinates; class keys are 1-based labels."""

    seed: int
    per_class: int
    class_names: list[str]
    train: dict[int, list[tuple[int, int]]]
    test: dict[int, list[tuple[int, int]]]

    def train_pixels(self) -> list[tuple[int, int, int]]:
        """Flattened ``(x, y, label)`` training pixels in class order."""
        return [(x, y, k) for k in sorted(self.train) for x, y in self.train[k]]

    def test_pixels(self) -> list[tuple[int, int, int]]:
        return [(x, y, k) for k in sorted(self.test) for x, y in self.test[k]]

    @property
    def n_train(self) -> int:
        return sum(len(v) for v in self.train.values())

    @property
    def n_test(self) -> int:
        return sum(len(v) for v in self.test.values())

    def to_json(self) -> dict:
        classes = {}
        for k, name in enumerate(self.class_names, start=1):
            classes[name] = {
                "train": [[x, y] for x, y in self.train.get(k, [])],
                "test": [[x, y] for x, y in self.test.get(k, [])],
            }
        return {"seed": self.seed, "per_class": self.per_class, "classes": classes}

    @classmethod
    def from_json(cls, d: dict) -> "Split":
        try:
            names = list(d["classes"])
            train, test = {}, {}
            for k, name in enumerate(names, start=1):
                entry = d["classes"][name]
                train[k] = [(int(x), int(y)) for x, y in entry["train"]]
                test[k] = [(int(x), int(y)) for x, y in entry["test"]]
            return cls(int(d["seed"]), int(d["per_class"]), names, train, test)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed split record: {exc}") from exc


def save_split(split: Split, path) -> None:
    Path(path).write_text(json.dumps(split.to_json()) + "\n")


def load_split(path) -> Split:
    try:
        return Split.from_json(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def split_train_test(labels: LabelMap, per_class: int, seed: int) -> Split:
    """Draw ``per_class`` training pixels per class uniformly without replacement.

    Every remaining labeled pixel goes to the test set.
    """
    if per_class < 0:
        raise ValidationError("per_class must be non-negative")
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for k, name in enumerate(labels.class_names, start=1):
        ys, xs = np.nonzero(labels.labels == k)
        coords = list(zip(xs.tolist(), ys.tolist()))
        if per_class > 0 and len(coords) <= per_class:
            raise ValidationError(
                f"class {name!r} has {len(coords)} labeled pixels, need more than {per_class}"
            )
        chosen = np.zeros(len(coords), dtype=bool)
        chosen[rng.permutation(len(coords))[:per_class]] = True
        train[k] = [c for c, m in zip(coords, chosen) if m]
        test[k] = [c for c, m in zip(coords, chosen) if not m]
    return Split(seed, per_class, list(labels.class_names), train, test)


def reflect_index(i, n: int):
    """Mirror an index into [0, n) without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.abs(i) % period
    return np.where(i >= n, period - i, i)


class Patch(NamedTuple):
    data: np.ndarray  # [B, P, P]
    label: int
    domain_id: int


def extract_patch(cube: HyperCube, x: int, y: int, size: int = PATCH_SIZE, label: int = 0, domain_id: int = 0) -> Patch:
    """P x P window centred on (x, y); outside pixels mirror across the border."""
    if not (0 <= x < cube.width and 0 <= y < cube.height):
        raise ValidationError(f"pixel ({x}, {y}) outside {cube.width}x{cube.height} image")
    if size <= 0 or size % 2 == 0:
        raise ValidationError("patch size must be a positive odd integer")
    r = size // 2
    offsets = np.arange(-r, r + 1)
    rows = reflect_index(y + offsets, cube.height)
    cols = reflect_index(x + offsets, cube.width)
    return Patch(cube.data[:, rows[:, None], cols[None, :]], label, domain_id)


def d4_transform(arr: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` of the dihedral group on the last two axes.

    0 identity, 1-3 rotations by 90/180/270 degrees, 4 mirror across the
    vertical axis, 5 across the horizontal axis, 6 across the main diagonal,
    7 across the anti-diagonal.
    """
    if arr.shape[-1] != arr.shape[-2]:
        raise ValidationError(f"D4 needs a square patch, got {arr.shape[-2:]}")
    if k == 0:
        out = arr
    elif k in (1, 2, 3):
        out = np.rot90(arr, k, axes=(-2, -1))
    elif k == 4:
        out = arr[..., :, ::-1]
    elif k == 5:
        out = arr[..., ::-1, :]
    elif k == 6:
        out = np.swapaxes(arr, -1, -2)
    elif k == 7:
        out = np.swapaxes(arr, -1, -2)[..., ::-1, ::-1]
    else:
        raise ValidationError(f"D4 element index must be in 0..7, got {k}")
    return np.ascontiguousarray(out)


def augment_d4(patch: Patch) -> list[Patch]:
    """The eight symmetries of the square applied to the spatial axes."""
    return [Patch(d4_transform(patch.data, k), patch.label, patch.domain_id) for k in range(N_TRANSFORMS)]


class Batch(NamedTuple):
    domain_id: int
    x: Tensor  # [M, B, P, P]
    labels: np.ndarray  # 0-based class indices
    coords: list[tuple[int, int]]


class BatchSchedule:
    """Endless per-iteration stream of one batch per domain.

    Each domain's candidate pool is its training pixels times the eight D4
    transforms; batches are drawn uniformly with replacement.  Augmented
    patches are materialized only when drawn.  Every domain has its own
    generator keyed on ``(seed, stream_keys[d])``, so a domain's batch
    sequence does not depend on which other domains are trained alongside.
    """

    def __init__(
        self,
        cubes: Sequence[HyperCube],
        train_pixels: Sequence[Sequence[tuple[int, int, int]]],
        batch_size: int = 10,
        seed: int = 0,
        patch_size: int = PATCH_SIZE,
        stream_keys: Sequence[int] | None = None,
    ):
        if len(cubes) != len(train_pixels):
            raise ValidationError("need one training pool per cube")
        for d, pool in enumerate(train_pixels):
            if not pool:
                raise ValidationError(f"domain {d} has an empty training pool")
        if batch_size <= 0:
            raise ValidationError("batch size must be positive")
        self.cubes = list(cubes)
        self.pools = [list(p) for p in train_pixels]
        self.batch_size = batch_size
        self.patch_size = patch_size
        keys = list(range(len(cubes))) if stream_keys is None else list(stream_keys)
        if len(keys) != len(cubes):
            raise ValidationError("need one stream key per domain")
        self.rngs = [np.random.default_rng([seed, k]) for k in keys]

    def pool_size(self, domain_id: int) -> int:
        return N_TRANSFORMS * len(self.pools[domain_id])

    def next_batches(self) -> list[Batch]:
        batches = []
        for d, (cube, pool, rng) in enumerate(zip(self.cubes, self.pools, self.rngs)):
            picks = rng.integers(0, N_TRANSFORMS * len(pool), size=self.batch_size)
            xs, labels, coords = [], [], []
            for pick in picks:
                x, y, label = pool[pick // N_TRANSFORMS]
                patch = extract_patch(cube, x, y, self.patch_size)
                xs.append(d4_transform(patch.data, int(pick % N_TRANSFORMS)))
                labels.append(label - 1)
                coords.append((x, y))
            batches.append(Batch(d, Tensor(np.stack(xs)), np.asarray(labels, dtype=np.int64), coords))
        return batches


def next_batches(schedule: BatchSchedule) -> list[Batch]:
    return schedule.next_batches()
