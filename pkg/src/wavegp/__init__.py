"""Gaussian-process sound-field reconstruction with a learned spacetime
kernel, regularized by the homogeneous wave equation at collocation
points, plus a diffuse-field baseline and an image-source room
simulator for end-to-end experiments."""

from .autodiff import (CycleDetected, Jet2, NonFiniteGradient, Tape, Var,
                       backward, grad_check, jet_propagate)
from .linalg import (CholeskyFactor, DimensionMismatch, NotPositiveDefinite,
                     cholesky, logdet, logdet_psd, solve, solve_psd)
from .featurenet import (IdentityFeatureMap, SirenConfig, SirenNet, SirenParams,
                         forward, forward_jet, init, load_checkpoint,
                         normalization_for, save_checkpoint)
from .kernels import (DeepKernel, DegenerateGrid, DiffuseKernel, JointGram,
                      KernelHyper, WaveOperatorSpec, assemble_joint, deep_kernel,
                      diffuse_freqs, diffuse_gram, diffuse_kernel,
                      gram_cross_wave, gram_values, gram_wave_wave,
                      se_feature_derivs, wave_cross, wave_double)
from .gp import (CollocationSet, Dataset, GPModel, SchurNotPD, nll_joint_schur,
                 nll_simple, posterior_cov, posterior_mean, sample_collocation)
from .trainer import (GradCheckReport, ModelParams, TrainConfig, TrainState,
                      adam_step, build_loss, load_train_state, save_train_state,
                      train, validate_gradients)
from .acoustics import (ImpulseResponse, PlacementError, RoomScenario,
                        SoundFieldData, image_sources, load_dataset, render_rir,
                        save_dataset, simulate, synth_source, t60_schroeder)
from .experiment import (EvalReport, ExperimentConfig, ParseError, ZeroReference,
                         band_nmse, band_split, nmse, parse_config, run)

__version__ = "0.1.0"
