"""Super-resolution training with trainable per-pixel loss weights."""

from .core import (
    CriterionValue,
    fixedsum,
    loss_phi,
    loss_theta,
    posterior_weight,
    weight_criterion,
    weighted_base_norm,
)
from .judge import JudgeSpec, build_fixed_feature_judge, judge_distance
from .models import SrModel, WeightModel, init_models
from .stochastic import RngState, sample_relaxed_bernoulli, seed_all
from .tensor import Tensor
from .trainer import TrainConfig, Trainer, four_loss_run, k_schedule, train_run

__version__ = "0.1.0"
