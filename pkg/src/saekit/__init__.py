"""Squeeze-aggregated-excitation networks on a small NumPy autograd core."""
from .blocks import SaEConfig, SaEParams, SEParams, init_sae_params, sae_forward, sae_param_count, se_forward
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .data import Dataset, load_cifar10, load_dataset, normalize, synthetic_blobs
from .errors import ConfigError, ContractError, DimensionError, FormatError, SaeKitError
from .gradcheck import check_model_gradients
from .models import ARCHS, ModelSpec, build_model, count_params, forward, param_breakdown, predict
from .tensor import Tensor, backward, grad_check, no_grad
from .training import TrainConfig, evaluate, metrics_csv, step_lr, train

__version__ = "0.1.0"
