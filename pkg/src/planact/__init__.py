"""planact: step-wise image-to-image translation with a planner-actor-critic loop.

A lightweight policy turns translation into a sequence of small steps:
the planner maps the state to a stochastic low-dimensional plan, the actor
decodes the plan into a dense action (a deformation field or an image),
and the critic scores (state, plan) pairs under a maximum-entropy RL
objective. Task-specific auxiliary losses train the planner-actor pair
jointly with the RL updates.
"""

from .checkpoint import Checkpoint, CheckpointError, count_parameters, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, parse_config_file, parse_config_text
from .data import DigitsDataset, builtin_digits, load_dataset
from .envs import (DigitsEnv, EnvStep, EpisodeConfig, EpisodePair, InpaintEnv, RegistrationEnv,
                   State, WarpEnv, make_digits_pair, make_synth_reg_pair)
from .harness import TrainResult, TrainingAborted, ablate, evaluate, train
from .losses import (Discriminator, FeatureExtractor, adversarial_losses, combined_aux,
                     compound_temporal, content_loss, gram_matrix, make_random_motion,
                     nst_objective, reconstruction_loss, registration_objective, style_loss,
                     total_variation)
from .merl import (Batch, NonFiniteLossError, ReplayPool, TemperatureState, Transition,
                   aux_step, critic_loss, critic_on_actor_losses, critic_step, make_optimizer,
                   planner_loss, planner_step, temperature_step, update_target)
from .metrics import (RewardConfig, SegmentationMap, dice, kmeans_segment, ncc_local, psnr,
                      ssim, step_reward)
from .nets import (PlanDistribution, PolicyNetworks, build_networks, gaussian_log_prob,
                   sample_plan)
from .warp import JacobianStats, compose_fields, jacobian_stats, spatial_gradient, warp_image, warp_labels

__version__ = "0.1.0"
