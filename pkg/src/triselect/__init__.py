"""Three-stage selection of crowdsensed images.

Stage I filters records on task metadata, Stage II groups the survivors by
viewpoint with spectral clustering, and Stage III keeps a budgeted set of
visually distinct images per group.
"""

from .errors import ConfigError, InputError, PipelineError, TriSelectError
from .graph import IndependentSetSelector, allocate_budget, build_graph, greedy_mis, select_representatives
from .metadata import GeoPoint, ImageRecord, Resolution, TaskSpec, Timestamp, parse_manifest, parse_task_spec
from .pipeline import PipelineConfig, RunReport, TriSelect, run_pipeline
from .prefilter import FilterReport, MetadataPreselector, preselect
from .spatial import ViewFeatureTransformer, ViewpointSpectralClustering, select_k, spectral_cluster
from .visual import GrayImage, SiftExtractor, extract_features, pair_similarity

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "InputError", "PipelineError", "TriSelectError",
    "IndependentSetSelector", "allocate_budget", "build_graph", "greedy_mis", "select_representatives",
    "GeoPoint", "ImageRecord", "Resolution", "TaskSpec", "Timestamp", "parse_manifest", "parse_task_spec",
    "PipelineConfig", "RunReport", "TriSelect", "run_pipeline",
    "FilterReport", "MetadataPreselector", "preselect",
    "ViewFeatureTransformer", "ViewpointSpectralClustering", "select_k", "spectral_cluster",
    "GrayImage", "SiftExtractor", "extract_features", "pair_similarity",
]
