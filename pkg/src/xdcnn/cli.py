"""Command-line entry point: ``xdcnn synth | train | eval | gradcheck | predict-map``.

Exit codes: 0 success, 2 usage/validation, 3 I/O or file format,
4 non-finite numerics, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import gradcheck, hsdata, sampler, traineval, xnet
from .errors import FormatError, NonFiniteError, ValidationError, VerificationError
from .hsdata import DomainSpec

log = logging.getLogger("xdcnn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

SYNTH_BANDS = (20, 24, 12)
SYNTH_CLASSES = (4, 4, 4)
SYNTH_NOISE = hsdata.SynthSpec.noise_sigma
SYNTH_PER_CLASS = 20
SYNTH_WIDTH = 32
CALIBRATION_BATCHES = 20


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class DomainEntry:
    name: str
    cube_path: Path
    labels_path: Path
    per_class: int
    band_keep_path: Path | None = None
    split_path: Path | None = None


@dataclass
class ExperimentConfig:
    domains: list[DomainEntry]
    train: traineval.TrainConfig = field(default_factory=traineval.TrainConfig)
    width: int = xnet.WIDTH
    patch_size: int = sampler.PATCH_SIZE
    split_seed: int = 0
    output_dir: Path = Path(".")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        known = {"domains", "train", "width", "patch_size", "split_seed", "output_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        base = path.parent

        def rel(p):
            return None if p is None else base / p

        entries = []
        for d in raw.get("domains") or []:
            try:
                entry = DomainEntry(
                    str(d["name"]), rel(d["cube_path"]), rel(d["labels_path"]), int(d["per_class"]),
                    rel(d.get("band_keep_path")), rel(d.get("split_path")),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: malformed domain entry {d!r}") from exc
            if entry.per_class <= 0:
                raise ValidationError(f"domain {entry.name!r}: per_class must be positive")
            entries.append(entry)
        if not entries:
            raise ValidationError(f"{path}: config needs at least one domain")
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValidationError(f"{path}: duplicate domain names {names}")
        try:
            width = int(raw.get("width", xnet.WIDTH))
            patch = int(raw.get("patch_size", sampler.PATCH_SIZE))
            split_seed = int(raw.get("split_seed", 0))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        if width <= 0 or patch <= 0 or patch % 2 == 0:
            raise ValidationError("width must be positive and patch_size a positive odd integer")
        return cls(
            entries,
            traineval.TrainConfig.from_dict(raw.get("train")),
            width,
            patch,
            split_seed,
            base / raw.get("output_dir", "."),
        )

    def entry(self, name: str) -> DomainEntry:
        for e in self.domains:
            if e.name == name:
                return e
        raise ValidationError(f"domain {name!r} not in config (have {[e.name for e in self.domains]})")


def _load_keep(path: Path) -> list[int]:
    try:
        keep = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read band keep-list {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(keep, dict):
        keep = keep.get("keep")
    if not isinstance(keep, list) or not all(isinstance(k, int) for k in keep):
        raise ValidationError(f"{path}: keep-list must be a JSON list of band indices")
    return keep


def load_domain(entry: DomainEntry, split_seed: int) -> tuple[DomainSpec, traineval.DomainData]:
    """Read one configured domain: cube (band-reduced), labels and split."""
    cube, frag = hsdata.load_cube(entry.cube_path)
    labels = hsdata.load_labels(entry.labels_path)
    keep: list[int] = []
    if entry.band_keep_path is not None:
        keep = _load_keep(entry.band_keep_path)
        cube = hsdata.band_reduce(cube, keep)
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValidationError(f"domain {entry.name!r}: label map and cube sizes differ")
    spec = DomainSpec(entry.name, frag["bands_raw"], cube.bands, list(labels.class_names), keep)
    if entry.split_path is not None and entry.split_path.exists():
        split = sampler.load_split(entry.split_path)
        if split.class_names != labels.class_names:
            raise ValidationError(f"domain {entry.name!r}: split classes do not match labels")
    else:
        split = sampler.split_train_test(labels, entry.per_class, split_seed)
    return spec, traineval.DomainData(cube, labels, split)


def _load_domains(cfg: ExperimentConfig, names=None):
    entries = cfg.domains if names is None else [cfg.entry(n) for n in names]
    loaded = [load_domain(e, cfg.split_seed) for e in entries]
    return [s for s, _ in loaded], [d for _, d in loaded]


# ---------------------------------------------------------------------------
# subcommands


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _cycle(values, n):
    return [values[i % len(values)] for i in range(n)]


def cmd_synth(args) -> int:
    n = args.domains
    if n <= 0:
        raise ValidationError("--domains must be positive")
    spec = hsdata.SynthSpec(
        n_domains=n,
        latent_dim=args.latent_dim,
        bands_per_domain=args.bands or _cycle(SYNTH_BANDS, n),
        classes_per_domain=args.classes or _cycle(SYNTH_CLASSES, n),
        image_size=args.size,
        noise_sigma=args.noise,
        blob_count=args.blobs,
        seed=args.seed,
    )
    domains = hsdata.synth_generate(spec)
    splits = [sampler.split_train_test(labels, args.per_class, args.seed) for _, labels, _ in domains]
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for (cube, labels, dspec), split in zip(domains, splits):
            hsdata.save_cube(cube, out / f"{dspec.name}.json")
            hsdata.save_labels(labels, out / f"{dspec.name}_labels.json")
            sampler.save_split(split, out / f"{dspec.name}_split.json")
            entries.append({
                "name": dspec.name,
                "cube_path": f"{dspec.name}.json",
                "labels_path": f"{dspec.name}_labels.json",
                "split_path": f"{dspec.name}_split.json",
                "per_class": args.per_class,
            })
        config = {
            "domains": entries,
            "train": {**traineval.DESK_SCALE, "seed": args.seed},
            "width": args.width,
            "patch_size": sampler.PATCH_SIZE,
            "split_seed": args.seed,
            "output_dir": ".",
        }
        (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write to {out}: {exc}") from exc
    print(f"wrote {n} synthetic domain(s) and config.json to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    train_cfg = cfg.train
    if args.iters is not None:
        train_cfg.iterations = args.iters
    if args.seed is not None:
        train_cfg.seed = args.seed
    train_cfg.validate()
    names = [args.individual] if args.individual else None
    specs, datasets = _load_domains(cfg, names)
    tag = f"individual_{args.individual}" if args.individual else "cross"
    ckpt = Path(args.out) if args.out else cfg.output_dir / f"{tag}.xdnc"
    csv_path = Path(args.log) if args.log else ckpt.with_suffix(".csv")

    net = xnet.build(specs, seed=train_cfg.seed, width=cfg.width)
    if args.individual:
        net, history = traineval.train_individual(net, datasets[0], train_cfg, cfg.patch_size)
    else:
        net, history = traineval.train(net, datasets, train_cfg, cfg.patch_size)
    try:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        xnet.save_checkpoint(net, ckpt)
        traineval.export_history(history, csv_path)
    except OSError as exc:
        raise FormatError(f"cannot write outputs: {exc}") from exc
    if history.final_losses:
        for spec, loss in zip(specs, history.final_losses):
            print(f"{spec.name}: final training loss {loss:.4f} (iteration {train_cfg.iterations - 1})")
    else:
        print("no iterations run; wrote the initialized network")
    print(f"checkpoint: {ckpt}\nhistory: {csv_path}")
    return EXIT_OK


def _check_against_config(net, specs_by_name, ckpt) -> None:
    for spec in net.domain_specs:
        if spec.name not in specs_by_name:
            raise ValidationError(f"{ckpt}: domain {spec.name!r} is not in the config")
        other = specs_by_name[spec.name]
        if (other.bands, other.n_classes) != (spec.bands, spec.n_classes):
            raise ValidationError(
                f"{ckpt}: domain {spec.name!r} has {spec.bands} bands/{spec.n_classes} classes, "
                f"config data has {other.bands}/{other.n_classes}"
            )


def _evaluate_checkpoint(path, cfg: ExperimentConfig, names) -> dict[str, traineval.EvalReport]:
    net = xnet.load_checkpoint(path)
    wanted = [s.name for s in net.domain_specs] if names is None else names
    for n in wanted:
        net.domain_index(n)
    specs, datasets = _load_domains(cfg, [s.name for s in net.domain_specs])
    _check_against_config(net, {s.name: s for s in specs}, path)
    if not traineval.bn_ready(net):
        log.warning("%s has no BN statistics yet; calibrating on training batches", path)
        traineval.calibrate_bn(net, datasets, CALIBRATION_BATCHES, cfg.train.batch_size,
                               cfg.train.seed, cfg.patch_size)
    reports = {}
    for name in wanted:
        d = net.domain_index(name)
        data = datasets[d]
        coords = [(x, y) for x, y, _ in data.split.test_pixels()]
        reports[name] = traineval.evaluate(net, d, data.cube, data.labels, coords, cfg.patch_size)
    return reports


def format_table(cross: dict[str, float], individual: dict[str, float] | None = None) -> str:
    """Accuracy table; with baselines it has Individual, Cross-Domain and Gain columns."""
    if individual is None:
        lines = [f"{'Dataset':<24}{'OA':>8}"]
        lines += [f"{name:<24}{oa:>8.3f}" for name, oa in cross.items()]
        return "\n".join(lines)
    lines = [f"{'Dataset':<24}{'Individual':>12}{'Cross-Domain':>14}{'Gain':>9}"]
    for name, oa in cross.items():
        if name in individual:
            base = individual[name]
            lines.append(f"{name:<24}{base:>12.3f}{oa:>14.3f}{oa - base:>+9.3f}")
        else:
            lines.append(f"{name:<24}{'-':>12}{oa:>14.3f}{'-':>9}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    names = [args.domain] if args.domain else None
    reports = _evaluate_checkpoint(args.ckpt, cfg, names)
    cross = {n: r.overall_accuracy for n, r in reports.items()}
    individual = None
    if args.baseline:
        individual = {}
        for path in args.baseline:
            for n, r in _evaluate_checkpoint(path, cfg, None).items():
                if n in individual:
                    raise ValidationError(f"two baseline checkpoints cover domain {n!r}")
                individual[n] = r.overall_accuracy
    print(format_table(cross, individual))
    if args.report:
        payload = {n: r.to_json() for n, r in reports.items()}
        try:
            Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
        except OSError as exc:
            raise FormatError(f"cannot write report: {exc}") from exc
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suite(args.seed, args.n_seeds)
    for report in reports:
        for line in report.lines():
            print(line)
    failed = [(r.seed, g) for r in reports for g in r.failures()]
    if failed:
        raise VerificationError(f"gradient check failed for {failed}")
    print(f"all groups passed for seeds {args.seed}..{args.seed + args.n_seeds - 1}")
    return EXIT_OK


def cmd_predict_map(args) -> int:
    net = xnet.load_checkpoint(args.ckpt)
    d = net.domain_index(args.domain)
    spec = net.domain_specs[d]
    cube, _ = hsdata.load_cube(args.cube)
    if spec.band_keep and cube.bands == spec.bands_raw:
        cube = hsdata.band_reduce(cube, spec.band_keep)
    if not traineval.bn_ready(net):
        raise ValidationError(f"{args.ckpt}: network has uninitialized statistics; train it first")
    labels = traineval.predict_map(net, d, cube)
    try:
        traineval.write_pgm(labels, args.out)
        if args.ppm:
            traineval.write_ppm(labels, args.ppm)
    except OSError as exc:
        raise FormatError(f"cannot write map: {exc}") from exc
    print(f"wrote {labels.width}x{labels.height} class map to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdcnn", description="Cross-domain CNN for hyperspectral classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic domains and a ready-to-train config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW (default 64x64)")
    p.add_argument("--bands", type=_int_list, default=None, help="comma-separated bands per domain")
    p.add_argument("--classes", type=_int_list, default=None, help="comma-separated classes per domain")
    p.add_argument("--noise", type=float, default=SYNTH_NOISE)
    p.add_argument("--per-class", type=int, default=SYNTH_PER_CLASS, help="training pixels per class")
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--blobs", type=int, default=24, help="Voronoi regions per image")
    p.add_argument("--width", type=int, default=SYNTH_WIDTH, help="network width written to the config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the cross-domain net or one individual baseline")
    p.add_argument("--config", required=True)
    p.add_argument("--individual", metavar="DOMAIN", help="train only this domain as a single-domain net")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="loss history CSV path")
    p.add_argument("--iters", type=int, help="override the iteration count")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="overall accuracy on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--domain", help="evaluate only this domain")
    p.add_argument("--report", help="write JSON reports here")
    p.add_argument("--baseline", nargs="+", metavar="CKPT", help="individual-net checkpoints for the Gain column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a small net")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict-map", help="whole-image class map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", required=True, help="cube header JSON")
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True, help="PGM output path")
    p.add_argument("--ppm", help="optional colour PPM output path")
    p.set_defaults(func=cmd_predict_map)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"error: non-finite value: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
