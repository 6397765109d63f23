"""Offline compression of weight matrices with direction-aware, Fisher-weighted autoencoders."""

from .autodiff import AEArch, LossSpec, TrainConfig, TrainReport, ae_forward, backward, loss_eval, train
from .compress import (
    FactorizedModule,
    InfeasibleRatioError,
    ModuleGroup,
    SparseModule,
    compress_ae,
    compress_fwsvd,
    compress_kronecker,
    compress_svd,
    compression_ratio,
    materialize,
    plan_latent_dim,
    prune_l1,
)
from .fisher import FisherTransform, FisherWeights, apply_transform, estimate_fisher, rowwise_diag
from .linalg import TruncatedSVD, kron, mean_cosine_distance, rmse, truncated_svd
from .tensor_io import TensorBundle, load_bundle, save_bundle

__version__ = "0.1.0"
