"""Per-tensor minifloat precision search for a batched planar motion-generation pipeline."""

__version__ = "0.1.0"
