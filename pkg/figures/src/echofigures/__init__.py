"""Deterministic figure rendering for spinecho CSV artifacts."""

__version__ = "0.1.0"

from .csvio import ArtifactTable, SchemaError, read_artifact
from .render import render_berry_scan, render_variance_scan

__all__ = ["ArtifactTable", "SchemaError", "read_artifact",
           "render_berry_scan", "render_variance_scan"]
