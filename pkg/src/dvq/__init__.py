"""Dynamic vector quantization: input-conditioned discrete bottlenecks."""

__version__ = "0.1.0"
