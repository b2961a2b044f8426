"""Central finite-difference checks of every primitive and a shrunken network.

Everything runs in float64.  The step for coordinate ``w`` is
``1e-5 * max(1, |w|)``.  When a perturbation flips any ReLU (detected by
comparing activation masks), the step is shrunk up to three times before the
coordinate is skipped; skips are counted in the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tape, Tensor
from .hsdata import DomainSpec

F64 = np.float64
REL_FLOOR = 1e-6
DEFAULT_THRESHOLD = 1e-4
BN_TRAIN_THRESHOLD = 1e-3


@dataclass
class GradcheckReport:
    seed: int
    errors: dict[str, float] = field(default_factory=dict)
    thresholds: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    def failures(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e < self.thresholds[g]]

    @property
    def passed(self) -> bool:
        return not self.failures()

    def lines(self) -> list[str]:
        out = []
        for g, e in self.errors.items():
            flag = "ok  " if e < self.thresholds[g] else "FAIL"
            skip = f"  (kink-skipped {self.skipped[g]})" if self.skipped.get(g) else ""
            out.append(f"{flag} seed={self.seed} {g:<28} max_rel_err={e:.3e} < {self.thresholds[g]:.0e}{skip}")
        return out


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=F64)
    n = np.asarray(numeric, dtype=F64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def _eval_probed(loss_fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    masks: list[np.ndarray] = []
    token = ad._relu_probe.set(masks)
    try:
        value = loss_fn().item()
    finally:
        ad._relu_probe.reset(token)
    return value, masks


def _same(ma: list[np.ndarray], mb: list[np.ndarray]) -> bool:
    return len(ma) == len(mb) and all(np.array_equal(a, b) for a, b in zip(ma, mb))


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor) -> tuple[np.ndarray, int]:
    """Central differences of ``loss_fn`` w.r.t. every element of ``t``.

    Returns the gradient estimate and the number of kink-skipped elements
    (left as NaN).
    """
    _, base_masks = _eval_probed(loss_fn)
    grad = np.zeros(t.shape, dtype=F64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    skipped = 0
    for i in range(flat.size):
        w = flat[i]
        h = 1e-5 * max(1.0, abs(w))
        for _ in range(4):
            flat[i] = w + h
            fp, mp = _eval_probed(loss_fn)
            flat[i] = w - h
            fm, mm = _eval_probed(loss_fn)
            flat[i] = w
            if _same(mp, base_masks) and _same(mm, base_masks):
                gflat[i] = (fp - fm) / (2 * h)
                break
            h /= 10
        else:
            gflat[i] = np.nan
            skipped += 1
    return grad, skipped


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: list[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    return [t.grad.copy() for t in tensors]


def _compare(report: GradcheckReport, group: str, loss_fn, tensors: dict[str, Tensor], threshold: float) -> None:
    names = list(tensors)
    analytic = analytic_grads(loss_fn, [tensors[n] for n in names])
    worst, skipped = 0.0, 0
    for name, a in zip(names, analytic):
        numeric, s = numeric_grad(loss_fn, tensors[name])
        keep = ~np.isnan(numeric)
        worst = max(worst, rel_err(a[keep], numeric[keep]))
        skipped += s
    report.errors[group] = worst
    report.thresholds[group] = threshold
    report.skipped[group] = skipped


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64)


def check_primitives(seed: int, report: GradcheckReport | None = None) -> GradcheckReport:
    rng = np.random.default_rng([seed, 101])
    report = report or GradcheckReport(seed)

    for k, pad in ((1, 0), (3, 1), (5, 2)):
        x = _param(rng, (2, 3, 5, 5))
        kern = _param(rng, (4, 3, k, k), 0.5)
        proj = rng.standard_normal((2, 4, 5, 5))
        _compare(report, f"conv2d.{k}x{k}", lambda: ad.weighted_sum(ad.conv2d(x, kern, pad), proj),
                 {"x": x, "k": kern}, DEFAULT_THRESHOLD)

    x = _param(rng, (3, 4, 2, 2))
    gamma = _param(rng, (4,), 0.5)
    gamma.data += 1.0
    beta = _param(rng, (4,), 0.5)
    proj = rng.standard_normal((3, 4, 2, 2))
    stats = RunningStats.zeros(4, F64)
    _compare(report, "batchnorm.train",
             lambda: ad.weighted_sum(ad.batchnorm(x, gamma, beta, "train", stats), proj),
             {"x": x, "gamma": gamma, "beta": beta}, BN_TRAIN_THRESHOLD)
    stats = RunningStats(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4), initialized=True)
    _compare(report, "batchnorm.eval",
             lambda: ad.weighted_sum(ad.batchnorm(x, gamma, beta, "eval", stats), proj),
             {"x": x, "gamma": gamma, "beta": beta}, DEFAULT_THRESHOLD)

    x = _param(rng, (2, 3, 4, 4))
    proj = rng.standard_normal((2, 3, 4, 4))
    _compare(report, "relu", lambda: ad.weighted_sum(ad.relu(x), proj), {"x": x}, DEFAULT_THRESHOLD)

    a, b = _param(rng, (2, 3, 4, 4)), _param(rng, (2, 3, 4, 4))
    _compare(report, "add", lambda: ad.weighted_sum(ad.add(a, b), proj), {"a": a, "b": b}, DEFAULT_THRESHOLD)

    parts = [_param(rng, (2, c, 3, 3)) for c in (1, 2, 3)]
    proj6 = rng.standard_normal((2, 6, 3, 3))
    _compare(report, "concat_channels", lambda: ad.weighted_sum(ad.concat_channels(parts), proj6),
             {f"p{i}": p for i, p in enumerate(parts)}, DEFAULT_THRESHOLD)

    x = _param(rng, (3, 4, 5, 5))
    proj = rng.standard_normal((3, 4))
    _compare(report, "center_pixel", lambda: ad.weighted_sum(ad.center_pixel(x), proj), {"x": x}, DEFAULT_THRESHOLD)
    _compare(report, "sum_all", lambda: ad.sum_all(x), {"x": x}, DEFAULT_THRESHOLD)

    logits = _param(rng, (5, 6), 2.0)
    labels = rng.integers(0, 6, 5)
    _compare(report, "softmax_xent", lambda: ad.softmax_xent(logits, labels), {"z": logits}, DEFAULT_THRESHOLD)
    return report


def micro_net(seed: int, width: int = 4):
    """Two-domain cross-domain net at ``width``, float64, generic random weights."""
    from . import xnet

    specs = [
        DomainSpec("micro_a", 3, 3, ["a", "b", "c"]),
        DomainSpec("micro_b", 2, 2, ["a", "b"]),
    ]
    net = xnet.build(specs, seed=seed, width=width, dtype=F64)
    rng = np.random.default_rng([seed, 202])
    for p in xnet.trainable_params(net, "all"):
        if p.ndim == 4:
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            p.data[...] = rng.standard_normal(p.shape) / np.sqrt(fan_in)
        elif p.name.endswith("gamma"):
            p.data[...] = 1.0 + 0.2 * rng.standard_normal(p.shape)
        else:
            p.data[...] = 0.2 * rng.standard_normal(p.shape)
    return net


def check_micro_net(seed: int, report: GradcheckReport | None = None, width: int = 4) -> GradcheckReport:
    """The full nine-stage network, both domains' losses summed."""
    from . import xnet

    report = report or GradcheckReport(seed)
    net = micro_net(seed, width)
    rng = np.random.default_rng([seed, 303])
    inputs = [Tensor(rng.standard_normal((4, s.bands, 5, 5)), dtype=F64) for s in net.domain_specs]
    labels = [rng.integers(0, s.n_classes, 4) for s in net.domain_specs]

    def loss_fn():
        losses = [ad.softmax_xent(xnet.forward(net, d, inputs[d], "train"), labels[d]) for d in range(net.n_domains)]
        return ad.add(losses[0], losses[1])

    groups = {"net.shared": xnet.trainable_params(net, "shared")}
    for d, spec in enumerate(net.domain_specs):
        groups[f"net.{spec.name}"] = xnet.trainable_params(net, d)
    for group, params in groups.items():
        _compare(report, group, loss_fn, {p.name: p for p in params}, DEFAULT_THRESHOLD)
    return report


def gradcheck(seed: int) -> GradcheckReport:
    report = check_primitives(seed)
    check_micro_net(seed, report)
    return report


def run_suite(seed: int = 0, n_seeds: int = 5) -> list[GradcheckReport]:
    return [gradcheck(seed + i) for i in range(n_seeds)]
