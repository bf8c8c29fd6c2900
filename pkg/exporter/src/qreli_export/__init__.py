"""qreli-export: thin bridge from CLIP checkpoints to qreli tensor bundles."""

__version__ = "0.1.0"

from .bundle_io import write_bundle
from .config import ExportConfig
from .export import export_embeddings, export_feature_maps, export_negatives

__all__ = [
    "write_bundle",
    "ExportConfig",
    "export_embeddings",
    "export_feature_maps",
    "export_negatives",
    "__version__",
]
