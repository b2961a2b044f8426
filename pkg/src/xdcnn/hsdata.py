"""Hyperspectral cubes, label maps, dataset descriptors and synthetic domains.

On-disk format: a small JSON header next to a raw little-endian raster.
Cubes are band-sequential float32 (``[bands, height, width]`` in memory),
label maps are uint16 with 0 meaning "unlabeled".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

FORMAT_VERSION = 1


@dataclass
class HyperCube:
    data: np.ndarray  # [bands, height, width] float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise ValidationError(f"cube must be a non-empty [bands, height, width] array, got {self.data.shape}")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # [height, width] uint16, 0 = unlabeled
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 2 or 0 in self.labels.shape:
            raise ValidationError(f"label map must be a non-empty [height, width] array, got {self.labels.shape}")
        if self.labels.max() > len(self.class_names):
            raise ValidationError(
                f"label {int(self.labels.max())} exceeds class count {len(self.class_names)}"
            )

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels[self.labels > 0], return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass
class DomainSpec:
    """Identity of one dataset: band layout and class list.

    ``bands`` is the reduced band count the network sees.  ``band_keep`` may
    be empty when the keep-list is not known (it is user-supplied config).
    """

    name: str
    bands_raw: int
    bands: int
    class_names: list[str]
    band_keep: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValidationError(f"domain {self.name!r} needs at least 2 classes")
        if self.bands <= 0 or self.bands_raw < self.bands:
            raise ValidationError(f"domain {self.name!r}: bad band counts {self.bands_raw}/{self.bands}")
        if self.band_keep:
            if len(self.band_keep) != self.bands:
                raise ValidationError(
                    f"domain {self.name!r}: keep-list has {len(self.band_keep)} entries, expected {self.bands}"
                )
            _check_keep(self.band_keep, self.bands_raw)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bands_raw": self.bands_raw,
            "bands": self.bands,
            "band_keep": list(self.band_keep),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            name=d["name"],
            bands_raw=int(d["bands_raw"]),
            bands=int(d["bands"]),
            class_names=list(d["class_names"]),
            band_keep=[int(i) for i in d.get("band_keep", [])],
        )


def _check_keep(keep, bands_raw: int) -> None:
    keep = list(keep)
    if not keep:
        raise ValidationError("band keep-list is empty")
    if any(i < 0 or i >= bands_raw for i in keep):
        raise ValidationError(f"band index out of range [0, {bands_raw})")
    if any(b <= a for a, b in zip(keep, keep[1:])):
        raise ValidationError("band keep-list must be strictly increasing (no duplicates)")


# ---------------------------------------------------------------------------
# file I/O


def _raw_path(header_path: Path, suffix: str) -> Path:
    name = header_path.name
    stem = name[: -len(".json")] if name.endswith(".json") else name
    return header_path.with_name(stem + suffix)


def _read_header(header_path: Path) -> dict:
    try:
        header = json.loads(Path(header_path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{header_path}: invalid JSON header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{header_path}: unsupported format_version {header.get('format_version')!r}")
    for key in ("width", "height"):
        if not isinstance(header.get(key), int) or header[key] <= 0:
            raise FormatError(f"{header_path}: field {key!r} must be a positive integer")
    return header


def _read_payload(header_path: Path, header: dict, dtype: str, count: int) -> np.ndarray:
    raw = Path(header_path).parent / header["raw"]
    if not raw.exists():
        raise FormatError(f"{header_path}: raw file {raw} is missing")
    payload = raw.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(payload) != count * itemsize:
        raise FormatError(
            f"{raw}: payload size mismatch (expected {count * itemsize} bytes, got {len(payload)})"
        )
    return np.frombuffer(payload, dtype=dtype)


def save_cube(cube: HyperCube, header_path) -> Path:
    """Write ``<stem>.json`` + ``<stem>.f32`` and return the header path."""
    header_path = Path(header_path)
    raw = _raw_path(header_path, ".f32")
    header = {
        "format_version": FORMAT_VERSION,
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "dtype": "f32le",
        "interleave": "bsq",
        "raw": raw.name,
    }
    raw.write_bytes(cube.data.astype("<f4").tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def load_cube(header_path) -> tuple[HyperCube, dict]:
    """Load a cube; also returns the descriptor fragment ``{"bands_raw": B}``."""
    header_path = Path(header_path)
    header = _read_header(header_path)
    if header.get("dtype") != "f32le" or header.get("interleave") != "bsq":
        raise FormatError(f"{header_path}: only f32le band-sequential cubes are supported")
    bands = header.get("bands")
    if not isinstance(bands, int) or bands <= 0:
        raise FormatError(f"{header_path}: field 'bands' must be a positive integer")
    shape = (bands, header["height"], header["width"])
    flat = _read_payload(header_path, header, "<f4", int(np.prod(shape)))
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise FormatError(f"{header_path}: non-finite value at flat index {int(bad[0])}")
    return HyperCube(flat.reshape(shape)), {"bands_raw": bands}


def save_labels(labels: LabelMap, header_path) -> Path:
    header_path = Path(header_path)
    raw = _raw_path(header_path, ".u16")
    header = {
        "format_version": FORMAT_VERSION,
        "width": labels.width,
        "height": labels.height,
        "dtype": "u16le",
        "raw": raw.name,
        "class_names": list(labels.class_names),
    }
    raw.write_bytes(labels.labels.astype("<u2").tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def load_labels(header_path) -> LabelMap:
    header_path = Path(header_path)
    header = _read_header(header_path)
    if header.get("dtype") != "u16le":
        raise FormatError(f"{header_path}: label maps must be u16le")
    names = header.get("class_names")
    if not isinstance(names, list):
        raise FormatError(f"{header_path}: missing class_names")
    shape = (header["height"], header["width"])
    flat = _read_payload(header_path, header, "<u2", shape[0] * shape[1])
    try:
        return LabelMap(flat.reshape(shape), [str(n) for n in names])
    except ValidationError as exc:
        raise FormatError(f"{header_path}: {exc}") from exc


def band_reduce(cube: HyperCube, keep) -> HyperCube:
    """Keep only the listed bands, in the given (increasing) order."""
    keep = [int(i) for i in keep]
    _check_keep(keep, cube.bands)
    return HyperCube(cube.data[keep])


# ---------------------------------------------------------------------------
# descriptors


def _load_descriptor(filename: str) -> dict:
    text = resources.files("xdcnn.descriptors").joinpath(filename).read_text()
    return json.loads(text)


BUILTIN_DESCRIPTORS = ("indian_pines.json", "salinas.json", "pavia_university.json")


def builtin_descriptors() -> list[dict]:
    """Raw descriptor records, including per-class train/test counts."""
    return [_load_descriptor(f) for f in BUILTIN_DESCRIPTORS]


def builtin_domain_specs() -> list[DomainSpec]:
    """Indian Pines, Salinas and University of Pavia (keep-lists left empty)."""
    return [DomainSpec.from_dict(d) for d in builtin_descriptors()]


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class SynthSpec:
    n_domains: int = 3
    latent_dim: int = 16
    bands_per_domain: list[int] = field(default_factory=lambda: [20, 24, 12])
    classes_per_domain: list[int] = field(default_factory=lambda: [4, 4, 4])
    image_size: tuple[int, int] = (64, 64)
    noise_sigma: float = 2.0
    blob_count: int = 24
    seed: int = 0

    def validate(self) -> None:
        n = self.n_domains
        if n <= 0 or self.latent_dim <= 0 or self.blob_count <= 0:
            raise ValidationError("synthetic spec counts must be positive")
        if len(self.bands_per_domain) != n or len(self.classes_per_domain) != n:
            raise ValidationError(f"need {n} band counts and {n} class counts")
        if min(self.bands_per_domain) <= 0:
            raise ValidationError("band counts must be positive")
        if min(self.classes_per_domain) < 2:
            raise ValidationError("each synthetic domain needs at least 2 classes")
        if max(self.classes_per_domain) > self.blob_count:
            raise ValidationError("blob_count must be at least the class count of every domain")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValidationError("image size must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")


def synth_latents(spec: SynthSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Shared class signatures [K, L] and per-domain band responses [B_d, L].

    These are the first draws of the generator stream, so they match what
    :func:`synth_generate` uses for the same spec.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return _draw_latents(spec, rng)


def _draw_latents(spec: SynthSpec, rng) -> tuple[np.ndarray, list[np.ndarray]]:
    pool = max(spec.classes_per_domain)
    signatures = rng.standard_normal((pool, spec.latent_dim))
    scale = 1.0 / np.sqrt(spec.latent_dim)
    responses = [rng.standard_normal((b, spec.latent_dim)) * scale for b in spec.bands_per_domain]
    return signatures, responses


def _voronoi_labels(rng, h: int, w: int, blobs: int, n_classes: int) -> np.ndarray:
    seeds = np.column_stack([rng.uniform(0, h, blobs), rng.uniform(0, w, blobs)])
    # every class owns at least one region
    owner = rng.permutation(np.arange(blobs) % n_classes)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] + 0.5 - seeds[:, 0]) ** 2 + (xx[..., None] + 0.5 - seeds[:, 1]) ** 2
    return (owner[np.argmin(d2, axis=-1)] + 1).astype(np.uint16)


def synth_generate(spec: SynthSpec) -> list[tuple[HyperCube, LabelMap, DomainSpec]]:
    """N synthetic domains whose classes share latent signatures.

    Pixel spectrum of class k in domain d is ``M_d @ s_k`` plus Gaussian
    noise; class regions are nearest-seed (Voronoi) cells.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    signatures, responses = _draw_latents(spec, rng)
    h, w = spec.image_size
    out = []
    for d in range(spec.n_domains):
        n_classes = spec.classes_per_domain[d]
        bands = spec.bands_per_domain[d]
        labels = _voronoi_labels(rng, h, w, spec.blob_count, n_classes)
        class_spectra = responses[d] @ signatures[:n_classes].T  # [B, C]
        cube = class_spectra[:, labels.astype(np.int64) - 1]
        if spec.noise_sigma > 0:
            cube = cube + rng.normal(0.0, spec.noise_sigma, size=cube.shape)
        names = [f"class{k + 1}" for k in range(n_classes)]
        dom = DomainSpec(f"synth{d}", bands, bands, names, list(range(bands)))
        out.append((HyperCube(cube.astype(np.float32)), LabelMap(labels, names), dom))
    return out
