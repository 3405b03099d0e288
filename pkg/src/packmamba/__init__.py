"""Variable-length sequence packing with boundary-aware conv and selective-scan operators."""

from .block import (BlockParams, Operator, OperatorClass, PUIReport, REGISTRY, init_block_params,
                    linear, mamba_block_backward, mamba_block_forward, mamba_block_packed,
                    mamba_block_serial, pui_check, rmsnorm, sigmoid, silu, softplus)
from .conv import ConvParams, conv1d_pack_backward, conv1d_pack_forward, conv1d_serial
from .packing import (PackedBatch, PackingError, PackPlan, SequenceBatch, compute_reverse_indices,
                      pack, padding_rate, plan_fifo, plan_greedy_sorted, plan_pad_to_max, unpack)
from .scan import (ScanLanePair, apply_boundary_reset, combine, parallel_scan, reverse_scan,
                   serial_reverse_scan, serial_scan)
from .ssm import (SSMGrads, SSMParams, discretize, ssm_backward_packed, ssm_backward_serial,
                  ssm_forward_packed, ssm_forward_serial)

__version__ = "0.1.0"
