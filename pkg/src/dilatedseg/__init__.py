"""Dilated convolutional network for myocardium and blood-pool segmentation.

A numpy implementation of a 10-layer 2D dilated CNN, its training loop,
three-plane volumetric inference, evaluation metrics and MetaImage I/O.
"""
from .errors import (DilatedSegError, FormatError, ConfigError, WeightFileError, ShapeError,
                     NumericError, LabelError)
from .volume import Volume
from .network import NetworkConfig, LayerSpec, default_config, receptive_field, parameter_count
from .inference import fuse_and_segment, SegmentationResult
from .metrics import evaluate, MetricsReport
from .phantom import PhantomSpec, make_phantom

__version__ = "0.1.0"
