"""Desk-scale diffusion-transformer inference runtime with adaptive latent
caching, importance-guided mixed-precision quantization, and redundancy-aware
layer pruning."""

from .errors import BudgetError, ConfigurationError, DimensionError, TraceFormatError
from .harness import (
    CalibrationData,
    RunConfig,
    RunMetrics,
    calibrate,
    compare_outputs,
    export_trace,
    import_trace,
    load_config,
    parse_config,
    run_benchmark,
    run_single,
)
from .model import DiTConfig, DiTModel, LayerHooks, init_model, predict_noise
from .quant import (
    QuantParams,
    QuantizedTensor,
    WeightBitPlan,
    allocate_weight_bits,
    balance_channels,
    compute_minmax_params,
    dequantize,
    quantize,
)
from .sampler import NoiseSchedule, forward_noise, generate, linear_beta_schedule, reverse_step
from .schedule import (
    ScheduleDecision,
    Scheduler,
    ThresholdConfig,
    Toggles,
    activation_bits,
    adapt_prune_rate,
    cumulative_variation,
    divergence_score,
    layer_similarity,
    prune_probability,
    redundancy_metric,
    refresh_interval,
)
from .tensor import Tensor, attention, layernorm, matmul_fp, matmul_int

__version__ = "0.1.0"
