"""Tiled vision-language engine: tiling, two-branch encoding, resolution
compression, distillation training, 4-bit weights and a cost bench."""

__version__ = "0.1.0"
