"""Low-precision int8 GEMM with prepacked weights and fused output pipelines."""

from qgemm import _backend
from qgemm.dispatch import KernelCache, classify, get_or_build_kernel, select_blocking
from qgemm.kernel import KernelVariant, execute_gemm, gemm
from qgemm.pack import (
    BlockingParams,
    PackedActivationBlock,
    PackedWeight,
    pack_a_plain,
    pack_a_with_row_offsets,
    prepack_split,
    prepack_weights,
    unpack_activation_block,
    unpack_weight,
)
from qgemm.pipeline import (
    BiasAdd,
    OutputPipeline,
    PipelineError,
    ReluQuantized,
    Requantize,
    SpMDMAdd,
    WriteDequantF32,
    WriteRawI32,
)
from qgemm.quant import (
    ColOffsets,
    QuantParams,
    RequantParams,
    RowOffsets,
    choose_quant_params,
    compute_col_offsets,
    dequantize,
    quantize,
    requantize,
)
from qgemm.sparse import SaturationBoundError, SparseWeightCSC, SplitWeight, max_threshold, split_outliers

backend_name = _backend.name
available_backends = _backend.available
use_backend = _backend.use

__version__ = "0.1.0"
