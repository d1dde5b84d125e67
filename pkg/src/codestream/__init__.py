"Blockwise guided sampling of a toy diffusion model, built on streams."

__version__ = '0.1.0-dev'

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import (batch_variance, expected_reward, fit_gaussian, gaussian_kl, kl_upper_bound,
                      normalized_reward, win_rate, GaussianFit, MetricsRow)
from .model import init_model, input_grad, loss_and_param_grads, predict_eps, EpsModel, GradBundle
from .profile import Profile
from .rewards import estimate_value, log_reward, reward, reward_grad, GaussianReward, QuantizedReward
from .samplers import (base_sample, base_trajectory, bon_sample, bon_samples, code_eta_sample, code_eta_samples,
                       code_sample, code_samples, grad_guided_sample, grad_guided_samples, guided_samples,
                       svdd_sample, svdd_samples, GuidanceConfig, Selection)
from .streams.core import *
from .streams.diffusion import *
from .trainer import evaluate_loss, sample_gmm, train, GmmSpec, MixtureDenoiser, TrainConfig
from . import rng
