"""Kernel-point convolution encoder and decoder."""

from scanloop.backbone.kernel import KernelLayout, influence_matrices, kpconv_forward
from scanloop.backbone.pyramid import (
    FeatureLevel,
    Pyramid,
    PyramidStructure,
    build_structure,
    decode,
    encode,
    init_backbone,
    level_sizes,
)

__all__ = [
    "FeatureLevel",
    "KernelLayout",
    "Pyramid",
    "PyramidStructure",
    "build_structure",
    "decode",
    "encode",
    "influence_matrices",
    "init_backbone",
    "kpconv_forward",
    "level_sizes",
]
