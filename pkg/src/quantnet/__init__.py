"""quantnet: small-CNN graph optimization and 8-bit post-training quantization.

A numpy library with four pieces:

* :mod:`quantnet.quant` - symmetric per-tensor quantization algebra.
* :mod:`quantnet.graph` / :mod:`quantnet.model_io` - CNN graph IR and its
  text model format with a float32 weight blob.
* :mod:`quantnet.passes` - batch-norm folding, conv+ReLU fusion,
  conv+element-wise-sum fusion and strided-consumer sparsity removal.
* :mod:`quantnet.calibrate` / :mod:`quantnet.execute` - max-abs calibration
  and the dual FP32 / mixed-precision INT8 executor.
"""

from .calibrate import (
    CalibrationTable,
    EmptyDatasetError,
    IncompleteStatsError,
    QuantEntry,
    TensorStats,
    build_table,
    collect_stats,
    emit_quantized_model,
)
from .execute import (
    ExecutionPlan,
    PlanError,
    RunReport,
    compare_runs,
    plan,
    run_fp32,
    run_int8,
)
from .graph import (
    BatchNorm,
    Convolution,
    CycleError,
    DanglingEdgeError,
    DanglingWeightError,
    EdgeShape,
    EltwiseSum,
    Graph,
    GraphError,
    InnerProduct,
    Input,
    Node,
    Pooling,
    ReLU,
    ShapeError,
    Softmax,
    graphs_equal,
    infer_shapes,
    topo_order,
)
from .model_io import (
    ParseError,
    UnknownLayerError,
    load_model,
    parse_model,
    save_model,
    serialize_model,
)
from .passes import (
    DEFAULT_PASSES,
    PASSES,
    PassReport,
    count_macs,
    fold_batchnorm,
    fuse_conv_eltwise_sum,
    fuse_conv_relu,
    optimize_pipeline,
    remove_sparsity,
)
from .quant import (
    AccumulatorOverflow,
    QuantParams,
    QuantTensor,
    compute_qfactor,
    dequantize,
    qadd,
    qmul_accumulate,
    quantize,
    round_half_to_even,
)

__version__ = "0.1.0"
