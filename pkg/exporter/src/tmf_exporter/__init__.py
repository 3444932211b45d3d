"""Checkpoint exporter: Keras/TFJS checkpoints to the TMF model format."""

from .export import export, make_fixtures
from .keras_reader import graph_from_config
from .model_ir import ExportError, ExportGraph, ExportNode, ExportTensor, write_tmf
from .tfjs_reader import load_tfjs_dir

__version__ = "0.1.0"
