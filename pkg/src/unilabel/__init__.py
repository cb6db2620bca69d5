"""Automatic construction of a unified label space across datasets."""
from .errors import (
    CapacityError,
    ConfigurationError,
    DataError,
    InfeasibleError,
    IntegrityError,
    NumericError,
    ParseError,
    ShapeError,
    StateError,
)
from .taxonomy import DatasetTaxonomy, LabelDef, MappingMatrix, UnifiedTaxonomy, validate_mapping
from .label_graph import LabelGraphParams
from .seg_model import PixelBatch
from .mapping_solver import solve_mappings, brute_force_mapping
from .node_budget import select_budget
from .trainer import Schedule, run_pipeline, prune_inactive_nodes, adapt_unseen_dataset
from .synth import PlantedWorld, canonical_config, generate_world, recovery_score

__all__ = [
    "CapacityError",
    "ConfigurationError",
    "DataError",
    "InfeasibleError",
    "IntegrityError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "StateError",
    "DatasetTaxonomy",
    "LabelDef",
    "MappingMatrix",
    "UnifiedTaxonomy",
    "validate_mapping",
    "LabelGraphParams",
    "PixelBatch",
    "solve_mappings",
    "brute_force_mapping",
    "select_budget",
    "Schedule",
    "run_pipeline",
    "prune_inactive_nodes",
    "adapt_unseen_dataset",
    "PlantedWorld",
    "canonical_config",
    "generate_world",
    "recovery_score",
]

__version__ = "0.1.0"
