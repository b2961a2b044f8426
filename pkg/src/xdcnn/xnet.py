"""The cross-domain network: per-domain front-ends and heads around one shared trunk.

Per stream (nine weighted conv stages, the three-branch bank counted once)::

    [1x1 | 3x3 | 5x5] -> concat -> BN -> ReLU            front-end   (per domain)
    conv2 -> BN -> ReLU                                  trunk       (shared)
    2 x residual(conv -> BN -> ReLU -> conv -> BN, +skip, ReLU)
    conv7 -> BN -> ReLU -> conv8 -> BN -> ReLU -> conv9  head        (per domain)

All convolutions are bias-free; conv2..conv9 are 1x1.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import FormatError, ValidationError
from .hsdata import DomainSpec

WIDTH = 128
STD_WIDE = 0.01  # layers 1, 2 and 9
STD_NARROW = 0.005  # everything else
MAGIC = b"XDNC"
CHECKPOINT_VERSION = 1


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    stats: RunningStats

    @classmethod
    def create(cls, channels: int, name: str, dtype) -> "BatchNorm":
        return cls(
            Tensor(np.ones(channels), requires_grad=True, dtype=dtype, name=f"{name}.gamma", decay=False),
            Tensor(np.zeros(channels), requires_grad=True, dtype=dtype, name=f"{name}.beta", decay=False),
            RunningStats.zeros(channels, dtype),
        )

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ad.batchnorm(x, self.gamma, self.beta, mode, self.stats)


@dataclass
class AnalysisFrontEnd:
    conv1x1: Tensor
    conv3x3: Tensor
    conv5x5: Tensor
    bn1: BatchNorm

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        parts = [
            ad.conv2d(x, self.conv1x1, 0),
            ad.conv2d(x, self.conv3x3, 1),
            ad.conv2d(x, self.conv5x5, 2),
        ]
        return ad.relu(self.bn1(ad.concat_channels(parts), mode))


@dataclass
class ResidualModule:
    conv_a: Tensor
    bn_a: BatchNorm
    conv_b: Tensor
    bn_b: BatchNorm

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = ad.relu(self.bn_a(ad.conv2d(x, self.conv_a), mode))
        h = self.bn_b(ad.conv2d(h, self.conv_b), mode)
        return ad.relu(ad.add(h, x))


@dataclass
class SharedTrunk:
    conv2: Tensor
    bn2: BatchNorm
    res1: ResidualModule
    res2: ResidualModule

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = ad.relu(self.bn2(ad.conv2d(x, self.conv2), mode))
        return self.res2(self.res1(h, mode), mode)


@dataclass
class ClassifierHead:
    conv7: Tensor
    bn7: BatchNorm
    conv8: Tensor
    bn8: BatchNorm
    conv9: Tensor

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = ad.relu(self.bn7(ad.conv2d(x, self.conv7), mode))
        h = ad.relu(self.bn8(ad.conv2d(h, self.conv8), mode))
        return ad.conv2d(h, self.conv9)


@dataclass
class CrossDomainNet:
    domain_specs: list[DomainSpec]
    fronts: list[AnalysisFrontEnd]
    trunk: SharedTrunk
    heads: list[ClassifierHead]
    width: int = WIDTH

    @property
    def n_domains(self) -> int:
        return len(self.domain_specs)

    @property
    def dtype(self):
        return self.trunk.conv2.dtype

    def domain_index(self, name: str) -> int:
        for i, spec in enumerate(self.domain_specs):
            if spec.name == name:
                return i
        raise ValidationError(f"unknown domain {name!r}")


# ---------------------------------------------------------------------------
# construction


def _gauss(rng, shape, std, name, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype, name=name)


def _build_trunk(rng, width: int, dtype) -> SharedTrunk:
    def res(tag):
        return ResidualModule(
            _gauss(rng, (width, width, 1, 1), STD_NARROW, f"trunk.{tag}.conv_a", dtype),
            BatchNorm.create(width, f"trunk.{tag}.bn_a", dtype),
            _gauss(rng, (width, width, 1, 1), STD_NARROW, f"trunk.{tag}.conv_b", dtype),
            BatchNorm.create(width, f"trunk.{tag}.bn_b", dtype),
        )

    return SharedTrunk(
        _gauss(rng, (width, 3 * width, 1, 1), STD_WIDE, "trunk.conv2", dtype),
        BatchNorm.create(width, "trunk.bn2", dtype),
        res("res1"),
        res("res2"),
    )


def _build_stream(rng, spec: DomainSpec, width: int, dtype) -> tuple[AnalysisFrontEnd, ClassifierHead]:
    b, p = spec.bands, f"{spec.name}"
    front = AnalysisFrontEnd(
        _gauss(rng, (width, b, 1, 1), STD_WIDE, f"front.{p}.conv1x1", dtype),
        _gauss(rng, (width, b, 3, 3), STD_WIDE, f"front.{p}.conv3x3", dtype),
        _gauss(rng, (width, b, 5, 5), STD_WIDE, f"front.{p}.conv5x5", dtype),
        BatchNorm.create(3 * width, f"front.{p}.bn1", dtype),
    )
    head = ClassifierHead(
        _gauss(rng, (width, width, 1, 1), STD_NARROW, f"head.{p}.conv7", dtype),
        BatchNorm.create(width, f"head.{p}.bn7", dtype),
        _gauss(rng, (width, width, 1, 1), STD_NARROW, f"head.{p}.conv8", dtype),
        BatchNorm.create(width, f"head.{p}.bn8", dtype),
        _gauss(rng, (spec.n_classes, width, 1, 1), STD_WIDE, f"head.{p}.conv9", dtype),
    )
    return front, head


def build(domain_specs: Sequence[DomainSpec], seed: int = 0, width: int = WIDTH, dtype=np.float32) -> CrossDomainNet:
    """Randomly initialized network for the given domains.

    The trunk and each domain's stream draw from their own generators keyed
    on ``seed`` (and the domain name), so a one-domain net built with the same
    seed starts from exactly the weights of that domain's stream here.
    """
    specs = list(domain_specs)
    if not specs:
        raise ValidationError("need at least one domain")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate domain names: {names}")
    if width <= 0:
        raise ValidationError("width must be positive")
    trunk = _build_trunk(np.random.default_rng([seed, 0]), width, dtype)
    fronts, heads = [], []
    for spec in specs:
        rng = np.random.default_rng([seed, 1, zlib.crc32(spec.name.encode("utf-8"))])
        front, head = _build_stream(rng, spec, width, dtype)
        fronts.append(front)
        heads.append(head)
    return CrossDomainNet(specs, fronts, trunk, heads, width)


# ---------------------------------------------------------------------------
# forward


def _check_domain(net: CrossDomainNet, domain_id: int) -> None:
    if not isinstance(domain_id, (int, np.integer)) or not 0 <= domain_id < net.n_domains:
        raise ValidationError(f"unknown domain id {domain_id!r} (net has {net.n_domains})")


def forward_map(net: CrossDomainNet, domain_id: int, batch: Tensor, mode: str = "train") -> Tensor:
    """Full logit map [M, C_d, H, W] for a [M, B_d, H, W] batch."""
    _check_domain(net, domain_id)
    spec = net.domain_specs[domain_id]
    if batch.ndim != 4 or batch.shape[1] != spec.bands:
        raise ValidationError(
            f"domain {spec.name!r} expects [M, {spec.bands}, H, W] input, got {batch.shape}"
        )
    h = net.fronts[domain_id](batch, mode)
    h = net.trunk(h, mode)
    return net.heads[domain_id](h, mode)


def forward(net: CrossDomainNet, domain_id: int, batch: Tensor, mode: str = "train") -> Tensor:
    """Centre-pixel logits [M, C_d]."""
    return ad.center_pixel(forward_map(net, domain_id, batch, mode))


# ---------------------------------------------------------------------------
# parameters


def _bn_params(bn: BatchNorm) -> list[Tensor]:
    return [bn.gamma, bn.beta]


def _res_params(r: ResidualModule) -> list[Tensor]:
    return [r.conv_a, *_bn_params(r.bn_a), r.conv_b, *_bn_params(r.bn_b)]


def _trunk_params(t: SharedTrunk) -> list[Tensor]:
    return [t.conv2, *_bn_params(t.bn2), *_res_params(t.res1), *_res_params(t.res2)]


def _front_params(f: AnalysisFrontEnd) -> list[Tensor]:
    return [f.conv1x1, f.conv3x3, f.conv5x5, *_bn_params(f.bn1)]


def _head_params(h: ClassifierHead) -> list[Tensor]:
    return [h.conv7, *_bn_params(h.bn7), h.conv8, *_bn_params(h.bn8), h.conv9]


def trainable_params(net: CrossDomainNet, partition="all") -> list[Tensor]:
    """Parameters in a stable order.

    ``partition`` is ``"shared"``, ``"all"``, ``"domains"`` (every per-domain
    tensor) or an integer domain index (that domain's front-end and head).
    """
    if partition == "shared":
        return _trunk_params(net.trunk)
    if partition == "domains":
        return [p for i in range(net.n_domains) for p in trainable_params(net, i)]
    if partition == "all":
        return trainable_params(net, "domains") + trainable_params(net, "shared")
    if isinstance(partition, (int, np.integer)):
        _check_domain(net, int(partition))
        return _front_params(net.fronts[partition]) + _head_params(net.heads[partition])
    raise ValidationError(f"unknown partition {partition!r}")


def _named_bns(net: CrossDomainNet) -> Iterator[tuple[str, BatchNorm]]:
    t = net.trunk
    yield "trunk.bn2", t.bn2
    for tag, r in (("res1", t.res1), ("res2", t.res2)):
        yield f"trunk.{tag}.bn_a", r.bn_a
        yield f"trunk.{tag}.bn_b", r.bn_b
    for spec, f, h in zip(net.domain_specs, net.fronts, net.heads):
        yield f"front.{spec.name}.bn1", f.bn1
        yield f"head.{spec.name}.bn7", h.bn7
        yield f"head.{spec.name}.bn8", h.bn8


def bn_layers(net: CrossDomainNet) -> list[BatchNorm]:
    return [bn for _, bn in _named_bns(net)]


def named_tensors(net: CrossDomainNet) -> dict[str, np.ndarray]:
    """Every parameter and running statistic, each shared array exactly once."""
    out = {p.name: p.data for p in trainable_params(net, "all")}
    for name, bn in _named_bns(net):
        out[f"{name}.running_mean"] = bn.stats.mean
        out[f"{name}.running_var"] = bn.stats.var
    return out


def count_params(params: Sequence[Tensor]) -> int:
    return sum(p.data.size for p in params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: CrossDomainNet, path) -> None:
    """Write the ``XDNC`` checkpoint (little-endian throughout)."""
    meta = {
        "width": net.width,
        "domains": [s.to_dict() for s in net.domain_specs],
        "bn_initialized": {name: bn.stats.initialized for name, bn in _named_bns(net)},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = named_tensors(net)
    buf = io.BytesIO()
    buf.write(MAGIC)
    ad.write_u32(buf, CHECKPOINT_VERSION)
    ad.write_u32(buf, len(blob))
    buf.write(blob)
    ad.write_u32(buf, len(tensors))
    for name, arr in tensors.items():
        ad.write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> CrossDomainNet:
    """Rebuild a network from a checkpoint; the whole file is validated first."""
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(4) != MAGIC:
        raise FormatError(f"{path}: not an XDNC checkpoint (bad magic)")
    version = ad.read_u32(fh)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(fh.read(ad.read_u32(fh)).decode("utf-8"))
        specs = [DomainSpec.from_dict(d) for d in meta["domains"]]
        width = int(meta["width"])
        initialized = dict(meta["bn_initialized"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint metadata ({exc})") from exc
    tensors = {}
    for _ in range(ad.read_u32(fh)):
        name, arr = ad.read_tensor(fh)
        tensors[name] = arr
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after tensor table")

    net = build(specs, seed=0, width=width)
    expected = named_tensors(net)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise FormatError(f"{path}: missing tensor {missing[0]!r}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise FormatError(f"{path}: unexpected tensor {extra[0]!r}")
    for name, arr in expected.items():
        if tensors[name].shape != arr.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}")
    for p in trainable_params(net, "all"):
        p.data[...] = tensors[p.name]
    for name, bn in _named_bns(net):
        bn.stats.mean = tensors[f"{name}.running_mean"].copy()
        bn.stats.var = tensors[f"{name}.running_var"].copy()
        bn.stats.initialized = bool(initialized.get(name, False))
    return net
