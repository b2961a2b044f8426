"""Multi-domain training loop, learning-rate schedule, evaluation and map output."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SgdState, Tape, Tensor
from .errors import NonFiniteError, ValidationError
from .hsdata import HyperCube, LabelMap
from .sampler import PATCH_SIZE, Batch, BatchSchedule, Split, extract_patch, reflect_index
from .xnet import CrossDomainNet, bn_layers, forward, forward_map, trainable_params

log = logging.getLogger(__name__)

LOG_EVERY = 20


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    iterations: int = 100_000
    lr_step: int = 40_000
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    seed: int = 0
    log_every: int = LOG_EVERY

    def validate(self) -> None:
        if self.base_lr <= 0 or self.lr_step <= 0 or self.batch_size <= 0 or self.log_every <= 0:
            raise ValidationError("base_lr, lr_step, batch_size and log_every must be positive")
        if self.iterations < 0:
            raise ValidationError("iterations must be non-negative")
        if not 0 < self.gamma < 1:
            raise ValidationError("gamma must lie in (0, 1)")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValidationError("momentum and weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


# desk-scale defaults keep the schedule shape at 1/20 of the full recipe
DESK_SCALE = {"iterations": 5000, "lr_step": 2000}


def lr_at(config: TrainConfig, iteration: int, n_domains: int = 1) -> tuple[float, float]:
    """(base, shared) learning rates at ``iteration``; shared = base / N.

    The step decay is evaluated in exact decimal arithmetic and rounded once,
    so 0.001 * 0.1**2 comes out as exactly 1e-05.
    """
    if iteration < 0:
        raise ValidationError("iteration must be non-negative")
    k = iteration // config.lr_step
    base = float(Fraction(repr(config.base_lr)) * Fraction(repr(config.gamma)) ** k)
    return base, base / n_domains


@dataclass
class HistoryRow:
    iteration: int
    domain: int
    loss: float
    lr: float
    shared_lr: float


@dataclass
class RunHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    final_losses: list[float] = field(default_factory=list, compare=False)

    def losses(self, domain: int) -> list[float]:
        return [r.loss for r in self.rows if r.domain == domain]


@dataclass
class DomainData:
    cube: HyperCube
    labels: LabelMap
    split: Split


def _check_streams(net: CrossDomainNet, datasets: Sequence[DomainData]) -> None:
    if len(datasets) != net.n_domains:
        raise ValidationError(f"net has {net.n_domains} domains but {len(datasets)} datasets were given")
    for spec, data in zip(net.domain_specs, datasets):
        if data.cube.bands != spec.bands:
            raise ValidationError(f"domain {spec.name!r}: cube has {data.cube.bands} bands, net expects {spec.bands}")
        if len(data.labels.class_names) != spec.n_classes:
            raise ValidationError(f"domain {spec.name!r}: class count mismatch")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_optimizer(net: CrossDomainNet, config: TrainConfig) -> SgdState:
    return SgdState.for_params(trainable_params(net, "all"), config.momentum, config.weight_decay)


def domain_losses(net: CrossDomainNet, batches: Sequence[Batch]) -> list[Tensor]:
    losses = []
    for b in batches:
        try:
            losses.append(ad.softmax_xent(forward(net, b.domain_id, b.x, "train"), b.labels))
        except NonFiniteError as exc:
            raise NonFiniteError(f"domain {net.domain_specs[b.domain_id].name!r}: {exc}") from exc
    return losses


def train_step(
    net: CrossDomainNet,
    batches: Sequence[Batch],
    state: SgdState,
    base_lr: float,
    shared_lr: float,
) -> list[float]:
    """One iteration: forward every domain, one backward of the summed loss, one update.

    Shared parameters receive the sum of all domains' gradients and take a
    step of ``shared_lr``.  Weight decay is part of each stream's objective,
    so the shared group accumulates it once per participating domain.
    """
    with Tape() as tape:
        losses = domain_losses(net, batches)
        total = losses[0]
        for loss in losses[1:]:
            total = ad.add(total, loss)
    ad.backward(tape, total)
    domain_params = [p for b in batches for p in trainable_params(net, b.domain_id)]
    ad.sgd_step(domain_params, None, state, base_lr)
    ad.sgd_step(trainable_params(net, "shared"), None, state, shared_lr, decay_scale=len(batches))
    return [loss.item() for loss in losses]


def train(
    net: CrossDomainNet,
    datasets: Sequence[DomainData],
    config: TrainConfig,
    patch_size: int = PATCH_SIZE,
) -> tuple[CrossDomainNet, RunHistory]:
    """Train all streams jointly for ``config.iterations`` iterations."""
    config.validate()
    _check_streams(net, datasets)
    schedule = BatchSchedule(
        [d.cube for d in datasets],
        [d.split.train_pixels() for d in datasets],
        batch_size=config.batch_size,
        seed=config.seed,
        patch_size=patch_size,
        stream_keys=[stream_key(s.name) for s in net.domain_specs],
    )
    state = make_optimizer(net, config)
    history = RunHistory()
    n = net.n_domains
    for it in range(config.iterations):
        base, shared = lr_at(config, it, n)
        try:
            losses = train_step(net, schedule.next_batches(), state, base, shared)
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {it}: {exc}") from exc
        if it % config.log_every == 0:
            for d, loss in enumerate(losses):
                history.rows.append(HistoryRow(it, d, loss, base, shared))
            log.debug("iter %d losses %s", it, ["%.4f" % v for v in losses])
        history.final_losses = losses
    return net, history


def calibrate_bn(net: CrossDomainNet, datasets: Sequence[DomainData], n_batches: int = 20,
                 batch_size: int = 10, seed: int = 0, patch_size: int = PATCH_SIZE) -> None:
    """Populate BN running statistics with train-mode forward passes only.

    Weights are untouched; this lets a freshly initialized net be evaluated.
    """
    _check_streams(net, datasets)
    schedule = BatchSchedule(
        [d.cube for d in datasets], [d.split.train_pixels() for d in datasets],
        batch_size=batch_size, seed=seed, patch_size=patch_size,
        stream_keys=[stream_key(s.name) for s in net.domain_specs],
    )
    for _ in range(n_batches):
        for b in schedule.next_batches():
            forward(net, b.domain_id, b.x, "train")


def bn_ready(net: CrossDomainNet) -> bool:
    return all(bn.stats.initialized for bn in bn_layers(net))


def train_individual(
    net: CrossDomainNet, dataset: DomainData, config: TrainConfig, patch_size: int = PATCH_SIZE
) -> tuple[CrossDomainNet, RunHistory]:
    """Baseline: the same loop with a single-domain network."""
    if net.n_domains != 1:
        raise ValidationError("individual training needs a single-domain network")
    return train(net, [dataset], config, patch_size)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: list[float]
    confusion: np.ndarray  # rows: true class, columns: predicted
    n_test: int
    class_names: list[str]

    def to_json(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class": dict(zip(self.class_names, self.per_class_accuracy)),
            "confusion": self.confusion.tolist(),
            "n_test": self.n_test,
        }


def report_from_predictions(y_true, y_pred, class_names: Sequence[str]) -> EvalReport:
    """Aggregate 0-based true/predicted class indices."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValidationError("empty test set")
    c = len(class_names)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    correct = int((y_true == y_pred).sum())
    rows = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / rows[k]) if rows[k] else float("nan") for k in range(c)]
    return EvalReport(correct / y_true.size, per_class, confusion, int(y_true.size), list(class_names))


def predict_pixels(
    net: CrossDomainNet, domain_id: int, cube: HyperCube, coords: Sequence[tuple[int, int]],
    patch_size: int = PATCH_SIZE, chunk: int = 256,
) -> np.ndarray:
    """0-based argmax class of the centre logits for each (x, y)."""
    preds = []
    for start in range(0, len(coords), chunk):
        part = coords[start:start + chunk]
        x = Tensor(np.stack([extract_patch(cube, px, py, patch_size).data for px, py in part]))
        logits = forward(net, domain_id, x, "eval").data
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(
    net: CrossDomainNet, domain_id: int, cube: HyperCube, labels: LabelMap,
    test_idx: Sequence[tuple[int, int]], patch_size: int = PATCH_SIZE,
) -> EvalReport:
    """Overall/per-class accuracy and confusion over the given test pixels."""
    if not test_idx:
        raise ValidationError("empty test set")
    coords = [(int(x), int(y)) for x, y in test_idx]
    truth = np.array([labels.labels[y, x] for x, y in coords], dtype=np.int64) - 1
    if truth.min() < 0:
        raise ValidationError("test set contains unlabeled pixels")
    preds = predict_pixels(net, domain_id, cube, coords, patch_size)
    return report_from_predictions(truth, preds, labels.class_names)


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# whole-image inference


def predict_map(net: CrossDomainNet, domain_id: int, cube: HyperCube, budget: int = 4_000_000) -> LabelMap:
    """Per-pixel class map via fully convolutional inference on mirror-padded tiles.

    Tiles are sized so the 5x5 im2col buffer stays near ``budget`` floats.
    """
    spec = net.domain_specs[domain_id]
    if cube.bands != spec.bands:
        raise ValidationError(f"domain {spec.name!r} expects {spec.bands} bands, cube has {cube.bands}")
    r = 2  # reach of the widest filter in the bank
    h, w = cube.height, cube.width
    rows = np.arange(-r, h + r)
    cols = np.arange(-r, w + r)
    padded = cube.data[:, reflect_index(rows, h)[:, None], reflect_index(cols, w)[None, :]]
    tile = max(1, budget // ((w + 2 * r) * cube.bands * 25) - 2 * r)
    out = np.zeros((h, w), dtype=np.uint16)
    for y0 in range(0, h, tile):
        y1 = min(h, y0 + tile)
        slab = Tensor(padded[None, :, y0:y1 + 2 * r, :])
        logits = forward_map(net, domain_id, slab, "eval").data[0]
        out[y0:y1] = np.argmax(logits[:, r:r + (y1 - y0), r:r + w], axis=0) + 1
    return LabelMap(out, list(spec.class_names))


# fixed 16-colour palette for class indices 1..16 (repeats beyond); 0 renders black
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
)


def write_pgm(labels: LabelMap, path) -> None:
    """Binary graymap, gray level = class index."""
    if labels.labels.max() > 255:
        raise ValidationError("PGM output supports at most 255 classes")
    header = f"P5\n{labels.width} {labels.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + labels.labels.astype(np.uint8).tobytes())


def write_ppm(labels: LabelMap, path) -> None:
    lut = np.zeros((65536, 3), dtype=np.uint8)
    for k in range(1, 65536):
        lut[k] = PALETTE[(k - 1) % len(PALETTE)]
    rgb = lut[labels.labels]
    header = f"P6\n{labels.width} {labels.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


# ---------------------------------------------------------------------------
# history CSV

CSV_HEADER = ["iter", "domain", "loss", "lr", "shared_lr"]


def export_history(history: RunHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in history.rows:
            writer.writerow([r.iteration, r.domain, repr(r.loss), repr(r.lr), repr(r.shared_lr)])


def read_history(path) -> RunHistory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValidationError(f"{path}: unexpected history header {header}")
        rows = [HistoryRow(int(a), int(b), float(c), float(d), float(e)) for a, b, c, d, e in reader]
    return RunHistory(rows)


def history_to_dicts(history: RunHistory) -> list[dict]:
    return [asdict(r) for r in history.rows]
