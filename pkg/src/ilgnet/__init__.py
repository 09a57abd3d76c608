"""ILGNet: inception backbone with connected local and global features for
binary image aesthetic-quality classification."""

from ilgnet.graph import ArchVariant, InceptionSpec, NetworkGraph, Variant, assemble, classify, count_layers, tap_features

__all__ = [
    "ArchVariant",
    "InceptionSpec",
    "NetworkGraph",
    "Variant",
    "assemble",
    "classify",
    "count_layers",
    "tap_features",
]
__version__ = "0.1.0"
