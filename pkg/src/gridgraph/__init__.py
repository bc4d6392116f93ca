"""Incomplete images as pixel graphs, spatial graph convolutions and their CNN baselines."""
from .imagegraph import IncompleteImage, PixelGraph, build_graph, build_graph_batch
from .graphconv import GcnLayer, SgcnLayer
from .refconv import ConvMask, conv2d, transposed_conv2d
from .equiv import compile_mask, verify_equivalence

__all__ = [
    "IncompleteImage", "PixelGraph", "build_graph", "build_graph_batch",
    "GcnLayer", "SgcnLayer", "ConvMask", "conv2d", "transposed_conv2d",
    "compile_mask", "verify_equivalence",
]
__version__ = "0.1.0"
