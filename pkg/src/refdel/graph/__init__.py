"""Model graphs, the derived training-step graph, and step execution."""

from .execute import (
    NodeExecutionError,
    StepHooks,
    StepResult,
    TrainingState,
    execute_step,
    initial_state,
    parameter_gradients,
    run_operator,
)
from .extended import DifferentiationError, ExtendedGraph, OptimizerConfig, build_extended_graph
from .model import (
    CycleError,
    DataDecl,
    ModelError,
    ModelGraph,
    ParamDecl,
    ParseError,
    ValidationError,
    format_model,
    infer_shapes,
    kahn_order,
    parse_model,
    topo_sort,
)
from .nodes import (
    AugmentedCGNode,
    GraphNode,
    OpKind,
    OperatorSpec,
    StepTrace,
    deserialize_node,
    deserialize_trace,
    serialize_node,
    serialize_trace,
)
from .optim import adam_update, sgd_update

__all__ = [
    "AugmentedCGNode", "CycleError", "DataDecl", "DifferentiationError", "ExtendedGraph",
    "GraphNode", "ModelError", "ModelGraph", "NodeExecutionError", "OpKind", "OperatorSpec",
    "OptimizerConfig", "ParamDecl", "ParseError", "StepHooks", "StepResult", "StepTrace",
    "TrainingState", "ValidationError", "adam_update", "build_extended_graph",
    "deserialize_node", "deserialize_trace", "execute_step", "format_model", "infer_shapes",
    "initial_state", "kahn_order", "parameter_gradients", "parse_model", "run_operator",
    "serialize_node", "serialize_trace", "sgd_update", "topo_sort",
]
