"""moelab: a desk-scale laboratory for studying how bounded compression
errors in MoE expert parameters affect inference accuracy."""

__version__ = "0.1.0"

from .core import RNG_ALGORITHM, RngStream, Tensor, matmul, sample_normal, softmax
from .model import (
    ExpertId, ExpertWeights, KvCache, ModelConfig, MoEModel, forward_prefill,
    greedy_decode, init_model, load_model, moe_layer_forward, route_topk,
    save_model,
)
from .tasks import Dataset, TaskSpec, format_spec, generate_dataset
from .training import TrainConfig, TrainResult, gradient_check, train
from .perturb import (
    PRESET_26_LAYER_GROUPS, AllInLayer, ErrorSpec, GroupedHighestFrequent,
    HighestFrequent, PerturbationPlan, RandomizeExpert, SingleExpert,
    TargetStrategy, TopKFrequent, build_plan, compute_error_bound,
    inject_errors, randomize_expert, select_targets,
)
from .codec import (
    BlockFormatError, CompressedBlock, compress_eb, decompress_eb, ratio,
    read_melc, write_melc,
)
from .quantizer import QuantizedBlock, dequantize_uniform, quantize_uniform
from .activation_stats import (
    ActivationLog, expert_utilization, export_heatmap, gini, imbalance_score,
    merge, metrics_summary, normalized_entropy,
)
from .scoring import EvalOutcome, FormatSpec, parse_output, score
from .offload import TransferParams, fetch_latency, speedup_report, transfer_time
from .experiment import (
    ConfigError, ExperimentConfig, Report, emit_report, evaluate_model,
    run_experiment,
)
