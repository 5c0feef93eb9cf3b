"""Offline per-layer feature extraction into XSMF caches."""

from .extract import ExtractionResult, extract
from .manifest import ManifestItem, load_manifest, write_manifest
from .xsmf import read_xsmf, write_xsmf

__version__ = "0.1.0"
