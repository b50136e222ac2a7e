"""Whole-body multi-organ segmentation from partially annotated sources."""

from .catalog import OrganCatalog, availability_mask, build_catalog, load_catalog
from .kernels import HAVE_COMPILED

__version__ = "0.1.0"

__all__ = ["OrganCatalog", "availability_mask", "build_catalog", "load_catalog", "HAVE_COMPILED"]
