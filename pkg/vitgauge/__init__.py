"""vitgauge - Training-free design, ranking and scaling of vision transformers."""

__version__ = "0.1.0"

from vitgauge.errors import ConfigurationError, EvaluationError, VitGaugeError
from vitgauge.topology import (
    SEED_SCALE,
    SEED_TOPOLOGY,
    ScaleSpec,
    SearchSpace,
    TopologySpec,
    decode,
    encode,
    sample_uniform,
    space_size,
    spec_hash,
    validate,
)
from vitgauge.network import build_network, count_flops, count_params, forward, param_gradients
from vitgauge.complexity import EvalProtocol, ComplexityReport, ProxyEvaluator, evaluate, ntk_condition
from vitgauge.search import Policy, policy_entropy, normalize_reward, run_search, search_step
from vitgauge.scaling import ScalingChoice, apply_choice, enumerate_choices, rank_and_select, run_autoscale
from vitgauge.retokenize import (
    TokenPhase,
    TokenSchedule,
    apply_phase,
    dilation_for_stride,
    flops_ratio,
    schedule_savings,
)
from vitgauge.dataset import ToyDataset, make_dataset
from vitgauge.trainer import TrainConfig, TrainResult, train
from vitgauge.study import correlation_study, kendall_tau

__all__ = [
    "__version__",
    "VitGaugeError",
    "ConfigurationError",
    "EvaluationError",
    "TopologySpec",
    "ScaleSpec",
    "SearchSpace",
    "SEED_TOPOLOGY",
    "SEED_SCALE",
    "validate",
    "space_size",
    "sample_uniform",
    "spec_hash",
    "encode",
    "decode",
    "build_network",
    "forward",
    "param_gradients",
    "count_params",
    "count_flops",
    "EvalProtocol",
    "ComplexityReport",
    "ProxyEvaluator",
    "evaluate",
    "ntk_condition",
    "Policy",
    "policy_entropy",
    "normalize_reward",
    "search_step",
    "run_search",
    "ScalingChoice",
    "enumerate_choices",
    "apply_choice",
    "rank_and_select",
    "run_autoscale",
    "TokenPhase",
    "TokenSchedule",
    "dilation_for_stride",
    "flops_ratio",
    "schedule_savings",
    "apply_phase",
    "ToyDataset",
    "make_dataset",
    "TrainConfig",
    "TrainResult",
    "train",
    "correlation_study",
    "kendall_tau",
]
