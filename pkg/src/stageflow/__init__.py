"""stageflow: an imperative tensor runtime with opt-in staging.

Ops execute eagerly by default. ``stage`` traces a host function into a
cached, optimized dataflow graph function; gradient tapes differentiate
both eager and staged computations; variables, checkpoints, and simulated
multi-device placement round out the runtime.
"""
from . import errors
from .checkpoint import Checkpoint, MatchReport, build_checkpoint, load_checkpoint, restore, save
from .devices import ACCEL, CPU, DeviceName, device_scope, list_devices
from .dtypes import DType, Shape, boolean, broadcast_shapes, float32, float64, int32
from .escape import HostCallback, escape_trace, host_call, register_callback
from .executor import execute
from .graph import GraphFunction, constant_fold, optimize, prune
from .ops import (
    add,
    broadcast_to,
    copy_to,
    div,
    dispatch,
    dropout,
    exp,
    eye,
    greater,
    identity,
    kernel_table,
    log,
    matmul,
    mul,
    neg,
    random_normal,
    reduce_mean,
    reduce_sum,
    register_op,
    relu,
    reshape,
    softplus,
    sub,
)
from .runtime import RuntimeOptions, get_runtime, init_runtime
from .serial import deserialize, serialize
from .staging import (
    PolymorphicFunction,
    TraceKey,
    cond,
    infer_trace_key,
    stage,
    while_loop,
)
from .state import SequenceIterator, Trackable, Variable, variable_create
from .tape import Tape
from .tensor import Tensor, constant, tensor_from_host, to_host

__version__ = "0.1.0"

__all__ = [
    "ACCEL",
    "CPU",
    "Checkpoint",
    "DType",
    "DeviceName",
    "GraphFunction",
    "HostCallback",
    "MatchReport",
    "PolymorphicFunction",
    "RuntimeOptions",
    "SequenceIterator",
    "Shape",
    "Tape",
    "Tensor",
    "TraceKey",
    "Trackable",
    "Variable",
    "add",
    "boolean",
    "broadcast_shapes",
    "broadcast_to",
    "build_checkpoint",
    "cond",
    "constant",
    "constant_fold",
    "copy_to",
    "deserialize",
    "device_scope",
    "dispatch",
    "div",
    "dropout",
    "errors",
    "escape_trace",
    "execute",
    "exp",
    "eye",
    "float32",
    "float64",
    "get_runtime",
    "greater",
    "host_call",
    "identity",
    "infer_trace_key",
    "init_runtime",
    "int32",
    "kernel_table",
    "list_devices",
    "load_checkpoint",
    "log",
    "matmul",
    "mul",
    "neg",
    "optimize",
    "prune",
    "random_normal",
    "reduce_mean",
    "reduce_sum",
    "register_callback",
    "register_op",
    "relu",
    "reshape",
    "restore",
    "save",
    "serialize",
    "softplus",
    "stage",
    "sub",
    "tensor_from_host",
    "to_host",
    "variable_create",
    "while_loop",
]
