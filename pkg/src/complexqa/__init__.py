"""Single-model quality assessment of protein complex decoys with a gated graph transformer."""

__version__ = "0.1.0"

from .errors import ComplexQAError  # noqa: E402,F401
