"""Few-shot knowledge graph completion with global and local graph-context encoders."""

from .config import TrainConfig, load_config
from .graph import KnowledgeGraphStore, Triple, load_dataset

__version__ = "0.1.0"

__all__ = ["KnowledgeGraphStore", "TrainConfig", "Triple", "load_config", "load_dataset", "__version__"]
