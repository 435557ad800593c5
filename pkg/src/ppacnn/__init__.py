"""Simulated pixel processor array running in-pixel binary/ternary CNNs."""
from .array import NoiseModel, PEArray, DEFAULT_NOISE
from .cost import CostModel, Trace, TraceReport, DEFAULT_COSTS
from .netplan import (NetworkSpec, Preset, QuantizedWeights, compile_plan, infer, evaluate,
                      load_weights, save_weights, parse, serialize, validate)
from .oracle import OracleConfig, dense_forward, score

__version__ = "0.1.0"
