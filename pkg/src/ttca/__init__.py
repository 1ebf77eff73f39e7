"""Tensor-train cross-approximation toolkit."""
from .core import QttMap, ResidencyMeter, TensorOracle, dense_oracle, function_oracle, virtual_oracle
from .cross import CrossReport, CrossState, cross_approximate, cross_interpolate, qtt_cross, select_indices
from .diffca import FrozenCross, RAdam, SGD, alternate_train, cross_vjp, gradcheck
from .maxvol import maxvol
from .projection import FeatureBasis, fit_projection, fit_projection_batched, project
from .tt import (TTTensor, tt_axpy, tt_eval, tt_eval_batch, tt_gauge, tt_inner, tt_orthogonalize,
                 tt_round, tt_stack, tt_svd, tt_to_dense)

__version__ = "0.1.0"
