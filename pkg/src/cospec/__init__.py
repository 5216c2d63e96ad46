"""Collaborative speculative decoding on a heterogeneous drafter cluster, at toy scale."""

from .core import DomainError, EmbeddingTable, Vocabulary
from .drafting import RoutingPolicy, cooperative_generate, fuse_step, route_request, routing_score, tree_selection
from .models import TabularModel, specialize
from .pipeline import ClusterSpec, DrafterSpec, PipelineConfig, run
from .scheduler import LatencyModel, SchedulerConfig, adaptive_speculation, batch_assign
from .verification import DraftTree, verify_linear, verify_tree

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "DomainError", "DraftTree", "DrafterSpec", "EmbeddingTable", "LatencyModel",
    "PipelineConfig", "RoutingPolicy", "SchedulerConfig", "TabularModel", "Vocabulary",
    "adaptive_speculation", "batch_assign", "cooperative_generate", "fuse_step", "route_request",
    "routing_score", "run", "specialize", "tree_selection", "verify_linear", "verify_tree",
]
