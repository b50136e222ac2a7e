"""Class universe: organs, background, region labels and per-source annotation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIZES = ("small", "medium", "large")
EXTENTS = ("short", "long")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class OrganDef:
    index: int
    name: str
    nominal_size: str = "medium"
    nominal_extent: str = "short"


@dataclass(frozen=True)
class AvailabilityVector:
    source: int
    mask: np.ndarray  # uint8, length C-1

    def __eq__(self, other):
        if not isinstance(other, AvailabilityVector):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash((self.source, self.mask.tobytes()))


@dataclass(frozen=True, eq=False)
class OrganCatalog:
    organs: tuple[OrganDef, ...]
    region_labels: tuple[str, ...]
    source_names: tuple[str, ...]
    availability: np.ndarray = field(repr=False)  # [num_sources, C-1] uint8
    config_hash: str = ""

    def __eq__(self, other):
        if not isinstance(other, OrganCatalog):
            return NotImplemented
        return (self.organs == other.organs and self.region_labels == other.region_labels
                and self.source_names == other.source_names
                and np.array_equal(self.availability, other.availability))

    def __hash__(self):
        return hash((self.organs, self.region_labels, self.source_names,
                     self.availability.tobytes()))

    @property
    def num_classes(self) -> int:
        """C: organs plus background."""
        return len(self.organs) + 1

    @property
    def num_organs(self) -> int:
        return len(self.organs)

    @property
    def background_index(self) -> int:
        return len(self.organs)

    @property
    def num_regions(self) -> int:
        return len(self.region_labels)

    @property
    def num_sources(self) -> int:
        return len(self.source_names)

    @property
    def organ_names(self) -> list[str]:
        return [o.name for o in self.organs]

    def organ_index(self, name: str) -> int:
        for o in self.organs:
            if o.name == name:
                return o.index
        raise KeyError(name)


def build_catalog(config: dict, *, strict: bool = True) -> OrganCatalog:
    """Validate a catalog config dict and build an immutable catalog.

    ``config`` has keys ``organs`` (list of ``{name, size, extent}``),
    ``regions`` (list of names) and ``sources`` (list of
    ``{name, available: [organ names]}``).  With ``strict`` the usual
    minimums (two regions, two sources) are enforced; the degenerate
    single-source catalog is only accepted with ``strict=False``.
    """
    organs_cfg = config.get("organs") or []
    regions = list(config.get("regions") or [])
    sources_cfg = config.get("sources") or []

    if not organs_cfg:
        raise CatalogError("catalog has no organs")
    if not regions:
        raise CatalogError("catalog has no regions")
    if not sources_cfg:
        raise CatalogError("catalog has no sources")
    if strict and len(regions) < 2:
        raise CatalogError("need at least 2 region labels")
    if strict and len(sources_cfg) < 2:
        raise CatalogError("need at least 2 data sources")

    organs = []
    seen = set()
    for i, o in enumerate(organs_cfg):
        name = o["name"]
        if name in seen:
            raise CatalogError(f"duplicate organ name {name!r}")
        seen.add(name)
        size = o.get("size", "medium")
        extent = o.get("extent", "short")
        if size not in SIZES:
            raise CatalogError(f"organ {name!r}: bad size {size!r}")
        if extent not in EXTENTS:
            raise CatalogError(f"organ {name!r}: bad extent {extent!r}")
        organs.append(OrganDef(i, name, size, extent))

    index = {o.name: o.index for o in organs}
    avail = np.zeros((len(sources_cfg), len(organs)), dtype=np.uint8)
    source_names = []
    for r, s in enumerate(sources_cfg):
        source_names.append(s.get("name", f"source{r}"))
        for name in s.get("available", []):
            if name not in index:
                raise CatalogError(f"source {source_names[-1]!r} lists unknown organ {name!r}")
            avail[r, index[name]] = 1

    never = [organs[c].name for c in np.flatnonzero(avail.sum(axis=0) == 0)]
    if never:
        raise CatalogError(f"organs not annotated by any source: {never}")
    avail.setflags(write=False)

    return OrganCatalog(
        organs=tuple(organs),
        region_labels=tuple(regions),
        source_names=tuple(source_names),
        availability=avail,
        config_hash=config_hash(config),
    )


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_catalog(path: str | Path) -> OrganCatalog:
    with open(path) as f:
        return build_catalog(json.load(f))


def availability_mask(catalog: OrganCatalog, source: int) -> AvailabilityVector:
    if not 0 <= source < catalog.num_sources:
        raise IndexError(f"source {source} out of range [0, {catalog.num_sources})")
    return AvailabilityVector(source, catalog.availability[source].copy())


# -- stock configurations ---------------------------------------------------

PAPER_REGIONS = ["head", "upper chest", "chest", "upper abdomen", "abdomen"]

_PAPER_HAN = [
    "Brain Stem", "Constrictor Naris", "Ear L", "Ear R", "Eye L", "Eye R",
    "Hypophysis", "Larynx", "Mandible", "Oral Cavity", "Parotid L", "Parotid R",
    "Smg L", "Smg R", "Spinal Cord", "Sublingual Gland", "Temporal Lobe L",
    "Temporal Lobe R", "TMJ L", "TMJ R", "Trachea",
]
_PAPER_THORAX = ["Heart", "Lung L", "Lung R", "Eso"]
_PAPER_ABDOMEN = [
    "Gallbladder", "Kidney L", "Kidney R", "Bag Bowel", "Liver", "Pancreas",
    "Spleen", "Stomach",
]


def paper_catalog_config() -> dict:
    """33 organs in three annotation blocks (head-and-neck, thorax, abdomen)."""
    small = {"Hypophysis", "Sublingual Gland", "Ear L", "Ear R", "Eye L", "Eye R",
             "TMJ L", "TMJ R", "Smg L", "Smg R", "Spinal Cord", "Constrictor Naris"}
    large = {"Heart", "Lung L", "Lung R", "Liver", "Bag Bowel", "Stomach",
             "Temporal Lobe L", "Temporal Lobe R"}
    long_ = {"Spinal Cord", "Eso", "Trachea", "Lung L", "Lung R", "Bag Bowel"}
    organs = []
    for name in _PAPER_HAN + _PAPER_THORAX + _PAPER_ABDOMEN:
        size = "small" if name in small else "large" if name in large else "medium"
        organs.append({"name": name, "size": size,
                       "extent": "long" if name in long_ else "short"})
    return {
        "organs": organs,
        "regions": list(PAPER_REGIONS),
        "sources": [
            {"name": "han", "available": list(_PAPER_HAN)},
            {"name": "thorax", "available": list(_PAPER_THORAX)},
            {"name": "abdomen", "available": list(_PAPER_ABDOMEN)},
        ],
    }


def phantom_catalog_config() -> dict:
    """Eight-organ universe (C=9) used by the synthetic phantoms."""
    return {
        "organs": [
            {"name": "brain_stem", "size": "medium", "extent": "short"},
            {"name": "sublingual_gland", "size": "small", "extent": "short"},
            {"name": "spinal_cord", "size": "small", "extent": "long"},
            {"name": "lung", "size": "large", "extent": "long"},
            {"name": "heart", "size": "large", "extent": "short"},
            {"name": "liver", "size": "large", "extent": "short"},
            {"name": "stomach", "size": "medium", "extent": "short"},
            {"name": "kidney", "size": "medium", "extent": "short"},
        ],
        "regions": list(PAPER_REGIONS),
        "sources": [
            {"name": "han", "available": ["brain_stem", "sublingual_gland", "spinal_cord"]},
            {"name": "thorax", "available": ["spinal_cord", "lung", "heart"]},
            {"name": "abdomen", "available": ["liver", "stomach", "kidney"]},
        ],
    }
