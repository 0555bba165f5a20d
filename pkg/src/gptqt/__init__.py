"""Two-step (linear, then binary-coding) post-training weight quantization.

Weights are first quantized linearly to an intermediate bit count, then a
binary-coding codebook over that integer grid is chosen per row, the scale
is re-searched around its initial value, and columns are quantized with
Hessian-based error compensation. The result fuses into pure binary coding
(``beta + sum(+-alpha_i)``) that a lookup-table matvec kernel consumes
directly.
"""

from .bc_gemm import build_lut, matvec_lut, matvec_reference
from .calib_stats import HessianState, accumulate, finalize, hdiag
from .fuse_pack import FusedRow, PackedBCMatrix, dequantize_packed, fuse_plan, pack
from .gptq_engine import Method, QuantMethod, QuantizedLayer, layer_output_error, quantize_layer
from .quant_core import Codebook, LinearParams, PlanConfig, RowPlan, build_row_plan
from .tensor_store import gen_activations, gen_weights, read_tensor, write_tensor

__version__ = "0.1.0"
