"""Reuse-aware workflow engine for parameter sensitivity studies."""

from .cluster import ClusterSimConfig, ClusterSimResult, simulate_cluster
from .errors import ConfigError, ExecutionError
from .params import (
    ParameterSet,
    ParameterSpace,
    ParameterSpec,
    SamplePlan,
    canonical_key,
    cardinality,
    halton,
    parse_space,
    sample,
)
from .reuse import (
    Bucket,
    MergedStage,
    ReuseStats,
    build_reuse_tree,
    merge_bucket,
    plan_reuse,
    rtma_buckets,
)
from .scheduler import (
    ExecutionTrace,
    SchedulerConfig,
    execute_plan,
    memory_bound_check,
    rmsr_execute,
)
from .sensitivity import MorrisIndices, SobolIndices, morris_indices, rank_parameters, sobol_vbd
from .store import DataObjectStore, StoreStats
from .workflow import (
    StageTemplate,
    TaskTemplate,
    WorkflowPlan,
    compact_compose,
    replica_compose,
    stage_level_dedup,
    task_signature,
)

__version__ = "0.1.0"
