"""Context-aware computational graphs executed across heartbeat-monitored workers."""

from .context import EMPTY, ORIGIN, ConflictError, Context, ContextEntry, context_union, flatten
from .graph import (
    CondensedGraph,
    CycleError,
    DanglingInputError,
    GraphError,
    GraphSpec,
    NodeDecl,
    OverlappingGroupError,
    UnknownNodeError,
    ValidatedGraph,
    compute_contexts,
    condense,
    validate_graph,
)
from .orchestrator import Journal, LocalExecutor, RetryPolicy, RunResult, replay, run_graph

__version__ = "0.1.0"
