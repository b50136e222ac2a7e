"""Synthetic whole-body phantoms with per-source partial annotation.

A phantom body is a stack of ``body_length`` axial slices split into region
bands (head ... abdomen).  Each data source images a fixed-length window of
that body; organs are ellipsoids or z-aligned tubes painted in catalog order.
Every organ keeps its intensity signature in every case, but only the organs
the source annotates survive in ``label_map``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import OrganCatalog, availability_mask


class PhantomSpecError(ValueError):
    pass


class CaseFormatError(ValueError):
    pass


@dataclass
class Part:
    """One geometric body in body coordinates (z, y, x in voxels).

    ``ellipsoid``: ``center`` = (z, y, x), ``radii`` = (rz, ry, rx).
    ``tube``: ``z_range`` = [z0, z1), ``center`` = (y, x), ``radii`` = (ry, rx).
    """

    kind: str
    center: tuple
    radii: tuple
    z_range: tuple | None = None

    def z_extent(self) -> tuple[float, float]:
        if self.kind == "tube":
            return float(self.z_range[0]), float(self.z_range[1])
        cz, rz = self.center[0], self.radii[0]
        return cz - rz, cz + rz

    def inplane(self) -> tuple[float, float, float, float]:
        if self.kind == "tube":
            (cy, cx), (ry, rx) = self.center, self.radii
        else:
            cy, cx = self.center[1:]
            ry, rx = self.radii[1:]
        return cy, cx, ry, rx


@dataclass
class OrganGeometry:
    parts: list[Part]
    intensity: float


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (40, 64, 64)
    spacing_mm: tuple[float, float, float] = (3.0, 1.5, 1.5)
    body_length: int = 100
    region_bands: list = field(default_factory=list)  # [start, end) per region
    source_windows: list = field(default_factory=list)  # [min_start, max_start] per source
    body_center: tuple[float, float] = (32.0, 32.0)
    body_radii: tuple[float, float] = (26.0, 29.0)
    body_intensity: float = 0.25
    organs: dict = field(default_factory=dict)  # name -> OrganGeometry
    shift_jitter_px: float = 1.5
    scale_jitter: float = 0.08
    intensity_jitter: float = 0.03
    noise_amplitude: float = 0.04
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        organs = {}
        for name, g in d.pop("organs", {}).items():
            parts = [
                Part(p["kind"], tuple(p["center"]), tuple(p["radii"]),
                     tuple(p["z_range"]) if p.get("z_range") is not None else None)
                for p in g["parts"]
            ]
            organs[name] = OrganGeometry(parts, float(g["intensity"]))
        for key in ("shape", "spacing_mm", "body_center", "body_radii"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(organs=organs, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for g in d["organs"].values():
            for p in g["parts"]:
                if p["z_range"] is None:
                    del p["z_range"]
        return json.loads(json.dumps(d))

    def region_of(self, z: int) -> int:
        for r, (a, b) in enumerate(self.region_bands):
            if a <= z < b:
                return r
        raise PhantomSpecError(f"body slice {z} not covered by any region band")


def load_spec(path) -> PhantomSpec:
    with open(path) as f:
        return PhantomSpec.from_dict(json.load(f))


def default_phantom_spec() -> PhantomSpec:
    """Desk-scale spec matching :func:`catalog.phantom_catalog_config`."""
    e = lambda c, r: Part("ellipsoid", c, r)  # noqa: E731
    organs = {
        "brain_stem": OrganGeometry([e((12, 30, 32), (7, 5, 5))], 0.55),
        "sublingual_gland": OrganGeometry([e((21, 16, 32), (1.6, 3, 4))], 0.70),
        "spinal_cord": OrganGeometry(
            [Part("tube", (45, 32), (2.5, 2.5), (8, 96))], 0.95),
        "lung": OrganGeometry(
            [e((39, 30, 17), (13, 9, 7)), e((39, 30, 47), (13, 9, 7))], 0.05),
        "heart": OrganGeometry([e((46, 28, 32), (7, 7, 6))], 0.65),
        "liver": OrganGeometry([e((63, 29, 22), (11, 10, 11))], 0.45),
        "stomach": OrganGeometry([e((65, 27, 44), (8, 6, 6))], 0.80),
        "kidney": OrganGeometry(
            [e((81, 40, 19), (8, 5, 4)), e((81, 40, 45), (8, 5, 4))], 0.60),
    }
    return PhantomSpec(
        region_bands=[[0, 22], [22, 36], [36, 54], [54, 70], [70, 100]],
        source_windows=[[0, 4], [24, 30], [50, 58]],
        organs=organs,
    )


# -- geometry -----------------------------------------------------------------

def validate_spec(spec: PhantomSpec, catalog: OrganCatalog) -> None:
    D, H, W = spec.shape
    if min(spec.shape) < 1 or any(s <= 0 for s in spec.spacing_mm):
        raise PhantomSpecError("shape and spacing must be positive")
    if len(spec.region_bands) != catalog.num_regions:
        raise PhantomSpecError("one region band per catalog region required")
    edges = [b for band in spec.region_bands for b in band]
    if edges[0] != 0 or edges[-1] != spec.body_length or any(
        spec.region_bands[i][1] != spec.region_bands[i + 1][0]
        for i in range(len(spec.region_bands) - 1)
    ):
        raise PhantomSpecError("region bands must tile [0, body_length) contiguously")
    if len(spec.source_windows) != catalog.num_sources:
        raise PhantomSpecError("one window per catalog source required")
    for lo, hi in spec.source_windows:
        if lo < 0 or hi < lo or hi + D > spec.body_length:
            raise PhantomSpecError(f"source window [{lo}, {hi}] + depth {D} overflows body")
    missing = set(catalog.organ_names) - set(spec.organs)
    if missing:
        raise PhantomSpecError(f"no geometry for organs {sorted(missing)}")

    slack = spec.shift_jitter_px
    grow = 1.0 + spec.scale_jitter
    for name, g in spec.organs.items():
        for p in g.parts:
            if p.kind not in ("ellipsoid", "tube"):
                raise PhantomSpecError(f"{name}: unknown part kind {p.kind!r}")
            cy, cx, ry, rx = p.inplane()
            if (cy - ry * grow - slack < 0 or cy + ry * grow + slack > H - 1
                    or cx - rx * grow - slack < 0 or cx + rx * grow + slack > W - 1):
                raise PhantomSpecError(f"{name}: geometry overflows the {H}x{W} plane")
            z0, z1 = p.z_extent()
            if z0 < 0 or z1 > spec.body_length:
                raise PhantomSpecError(f"{name}: geometry overflows the body length")

    # imbalance regime: one long organ across bands, one organ of <= 3 slices
    spans = {name: _organ_slices(g) for name, g in spec.organs.items()}
    long_ok = any(
        len({spec.region_of(z) for z in zs if 0 <= z < spec.body_length}) >= 2
        for zs in spans.values()
    )
    short_ok = any(0 < len(zs) <= 3 for zs in spans.values())
    if not (long_ok and short_ok):
        raise PhantomSpecError("spec needs a long multi-region organ and a short (<=3 slice) organ")

    # partial annotation must be non-vacuous somewhere
    vacuous = True
    for r, (lo, hi) in enumerate(spec.source_windows):
        seen = set(range(lo, hi + D))
        mask = catalog.availability[r]
        for o in catalog.organs:
            if mask[o.index] == 0 and spans[o.name] & seen:
                vacuous = False
    if vacuous:
        raise PhantomSpecError("no organ is present-but-unannotated in any source")


def _organ_slices(g: OrganGeometry) -> set[int]:
    zs = set()
    for p in g.parts:
        if p.kind == "tube":
            zs.update(range(math.ceil(p.z_range[0]), math.ceil(p.z_range[1])))
        else:
            cz, rz = p.center[0], p.radii[0]
            zs.update(z for z in range(math.floor(cz - rz), math.ceil(cz + rz) + 1)
                      if abs(z - cz) < rz)
    return zs


def realize_geometry(spec: PhantomSpec, rng: np.random.Generator) -> dict[str, OrganGeometry]:
    """Apply per-case shift/scale/intensity jitter to the nominal geometry."""
    out = {}
    for name in spec.organs:
        g = spec.organs[name]
        dy, dx = rng.uniform(-spec.shift_jitter_px, spec.shift_jitter_px, size=2)
        s = rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter)
        di = rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
        parts = []
        for p in g.parts:
            if p.kind == "tube":
                (cy, cx), (ry, rx) = p.center, p.radii
                parts.append(Part("tube", (cy + dy, cx + dx), (ry * s, rx * s), p.z_range))
            else:
                cz, cy, cx = p.center
                rz, ry, rx = p.radii
                parts.append(Part("ellipsoid", (cz, cy + dy, cx + dx), (rz, ry * s, rx * s)))
        out[name] = OrganGeometry(parts, float(np.clip(g.intensity + di, 0.0, 1.0)))
    return out


def part_mask(p: Part, z: np.ndarray, H: int, W: int) -> np.ndarray:
    """Boolean occupancy of ``p`` on body slices ``z`` (shape [len(z), H, W])."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    z = np.asarray(z, dtype=np.float64)[:, None, None]
    cy, cx, ry, rx = p.inplane()
    q = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    if p.kind == "tube":
        inside_z = (z >= p.z_range[0]) & (z < p.z_range[1])
        return (q[None] <= 1.0) & inside_z
    cz, rz = p.center[0], p.radii[0]
    return q[None] + ((z - cz) / rz) ** 2 <= 1.0


def analytic_voxels(p: Part, z: np.ndarray) -> float:
    """Slice-wise area integral of ``p`` over body slices ``z``."""
    cy, cx, ry, rx = p.inplane()
    area = math.pi * ry * rx
    z = np.asarray(z, dtype=np.float64)
    if p.kind == "tube":
        return area * float(np.sum((z >= p.z_range[0]) & (z < p.z_range[1])))
    f = 1.0 - ((z - p.center[0]) / p.radii[0]) ** 2
    return area * float(np.sum(np.clip(f, 0.0, None)))


# -- cases ----------------------------------------------------------------------

@dataclass(eq=False)
class CaseVolume:
    intensities: np.ndarray  # float32 [D, H0, W0]
    spacing_mm: tuple[float, float, float]
    source: int
    region_per_slice: np.ndarray  # int64 [D]
    label_map: np.ndarray  # uint8 [D, H0, W0], partialized
    full_label_map: np.ndarray  # uint8 [D, H0, W0]
    case_id: str = ""
    catalog_hash: str = ""

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)

    def __eq__(self, other):
        if not isinstance(other, CaseVolume):
            return NotImplemented
        return (
            tuple(self.spacing_mm) == tuple(other.spacing_mm)
            and self.source == other.source
            and self.case_id == other.case_id
            and self.catalog_hash == other.catalog_hash
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.intensities, other.intensities),
                    (self.region_per_slice, other.region_per_slice),
                    (self.label_map, other.label_map),
                    (self.full_label_map, other.full_label_map),
                )
            )
        )


def partialize(full: np.ndarray, catalog: OrganCatalog, source: int) -> np.ndarray:
    lut = np.arange(catalog.num_classes, dtype=np.uint8)
    lut[:-1][availability_mask(catalog, source).mask == 0] = catalog.background_index
    return lut[full]


def generate_case(catalog: OrganCatalog, spec: PhantomSpec, source: int, seed: int,
                  case_id: str = "") -> CaseVolume:
    validate_spec(spec, catalog)
    if not 0 <= source < catalog.num_sources:
        raise IndexError(f"source {source} out of range")
    rng = np.random.default_rng([spec.seed, source, seed])
    D, H, W = spec.shape
    lo, hi = spec.source_windows[source]
    start = int(rng.integers(lo, hi + 1))
    z = np.arange(start, start + D)
    geometry = realize_geometry(spec, rng)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    by, bx = spec.body_center
    bry, brx = spec.body_radii
    body = ((yy - by) / bry) ** 2 + ((xx - bx) / brx) ** 2 <= 1.0

    img = np.zeros((D, H, W), dtype=np.float64)
    img[:, body] = spec.body_intensity
    full = np.full((D, H, W), catalog.background_index, dtype=np.uint8)
    for organ in catalog.organs:
        g = geometry[organ.name]
        for p in g.parts:
            m = part_mask(p, z, H, W)
            full[m] = organ.index
            img[m] = g.intensity

    img += rng.normal(0.0, spec.noise_amplitude, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)

    return CaseVolume(
        intensities=img.astype(np.float32),
        spacing_mm=tuple(float(s) for s in spec.spacing_mm),
        source=source,
        region_per_slice=np.array([spec.region_of(int(k)) for k in z], dtype=np.int64),
        label_map=partialize(full, catalog, source),
        full_label_map=full,
        case_id=case_id,
        catalog_hash=catalog.config_hash,
    )


def organ_slice_counts(cases, catalog: OrganCatalog, full: bool = False) -> tuple[dict, int]:
    """Per-organ count of slices containing the organ, and the total slice count."""
    counts = {name: 0 for name in catalog.organ_names}
    total = 0
    for case in cases:
        labels = case.full_label_map if full else case.label_map
        total += labels.shape[0]
        for o in catalog.organs:
            counts[o.name] += int(np.any(labels == o.index, axis=(1, 2)).sum())
    return counts, total


# -- serialization --------------------------------------------------------------

_FILES = {
    "volume.raw": ("intensities", "<f4"),
    "labels.raw": ("label_map", "u1"),
    "labels_full.raw": ("full_label_map", "u1"),
}


def write_case(case: CaseVolume, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for fname, (attr, dtype) in _FILES.items():
        blob = np.ascontiguousarray(getattr(case, attr), dtype=dtype).tobytes()
        (d / fname).write_bytes(blob)
        checksums[fname] = hashlib.sha256(blob).hexdigest()
    meta = {
        "shape": list(case.shape),
        "spacing_mm": list(case.spacing_mm),
        "source": int(case.source),
        "region_per_slice": [int(r) for r in case.region_per_slice],
        "catalog_hash": case.catalog_hash,
        "case_id": case.case_id,
        "checksums": checksums,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return d


def read_case(directory) -> CaseVolume:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError as e:
        raise CaseFormatError(f"{d}: missing meta.json") from e
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3:
        raise CaseFormatError(f"{d}: shape must be [D, H0, W0]")
    if len(meta["region_per_slice"]) != shape[0]:
        raise CaseFormatError(f"{d}: region_per_slice length does not match depth")
    arrays = {}
    for fname, (attr, dtype) in _FILES.items():
        path = d / fname
        if not path.exists():
            raise CaseFormatError(f"{d}: missing {fname}")
        blob = path.read_bytes()
        expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if len(blob) != expected:
            raise CaseFormatError(
                f"{d}/{fname}: shape mismatch, {len(blob)} bytes for shape {list(shape)}"
                f" (expected {expected})")
        want = meta.get("checksums", {}).get(fname)
        if want is not None and hashlib.sha256(blob).hexdigest() != want:
            raise CaseFormatError(f"{d}/{fname}: checksum mismatch")
        arr = np.frombuffer(blob, dtype=dtype).reshape(shape)
        arrays[attr] = arr.astype(np.float32 if dtype == "<f4" else np.uint8)
    return CaseVolume(
        spacing_mm=tuple(float(s) for s in meta["spacing_mm"]),
        source=int(meta["source"]),
        region_per_slice=np.asarray(meta["region_per_slice"], dtype=np.int64),
        case_id=meta.get("case_id", ""),
        catalog_hash=meta.get("catalog_hash", ""),
        **arrays,
    )


def list_cases(data_dir) -> list[Path]:
    return sorted(p.parent for p in Path(data_dir).glob("*/meta.json"))
