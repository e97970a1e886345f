"""Watermarking toolkit for 3D Gaussian splatting models.

Marker Gaussians are densified from high-uncertainty Gaussians and optimized
so that a frozen image decoder reads a 48-bit message from renders; a
point-set decoder then learns to read the same message from the Gaussians.
"""

from gsmark.cloud import Gaussian, GaussianCloud, Origin, build_covariance, load_ply, save_ply, union
from gsmark.fisher import UncertaintyEstimator
from gsmark.marker import EmbedConfig, GaussianMarker
from gsmark.message import Message
from gsmark.render import Camera, render
from gsmark.scenes import CloudFitter, make_toy_scene
from gsmark.wm2d import HiddenCodec
from gsmark.wm3d import PointMessageDecoder

__version__ = "0.1.0"

__all__ = ["Gaussian", "GaussianCloud", "Origin", "build_covariance", "load_ply", "save_ply", "union",
           "UncertaintyEstimator", "EmbedConfig", "GaussianMarker", "Message", "Camera", "render",
           "CloudFitter", "make_toy_scene", "HiddenCodec", "PointMessageDecoder", "__version__"]
