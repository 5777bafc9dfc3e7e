"""Distribution-restrained softmax loss, gradient attacks and robustness analysis.

Everything runs on a small numpy reverse-mode autograd engine; the experiment
harness lives in :mod:`drsl.harness`.
"""

from .attacks import AttackSpec, fgsm, ifgsm, pgd, run_attack
from .losses import LossSpec, compute_loss
from .models import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, grad, grad_check

__version__ = "0.1.0"

__all__ = ["AttackSpec", "LossSpec", "ModelConfig", "Tape", "Tensor", "compute_loss", "fgsm", "grad", "grad_check",
           "ifgsm", "init_model", "load_checkpoint", "pgd", "run_attack", "save_checkpoint", "__version__"]
