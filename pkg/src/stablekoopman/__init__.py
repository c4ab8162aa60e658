"""Stable Koopman operator models with Bayesian uncertainty quantification."""

from .data import (DerivativeDataset, PodBasis, Trajectory, TrajectoryDataset, add_noise,
                   analytic_reference_fixed_point, duffing_system, fixed_point_system, get_system,
                   hopf_system, integrate_rk4, lhs_sample, limit_cycle_surrogate, linear_system,
                   make_diff_dataset, pod_project, simulate_trajectories)
from .errors import (ConvergenceError, DataError, DegenerateScaleError, DimensionError, DomainError,
                     FormatError, KoopmanError, NumericError, TapeError, TrainingError)
from .linalg import eigenvalues, matexp, ou_covariance, ou_covariance_quadrature
from .model import (KoopmanModel, Normalizer, StableKoopman, assemble_K, decode, eigenfunctions,
                    encode, fit_normalizer, init_from_dmd, koopman_matrix, koopman_spectrum, modal_amplitudes,
                    load_checkpoint, save_checkpoint, stable_from_spectrum)
from .predict import (PredictiveEnsemble, predict_map, predict_posterior_diff,
                      predict_posterior_recurrent, summarize)
from .training import (AdamState, DiffBatch, TrainConfig, TrajBatch, adam_step, diff_loss, hankelize,
                       recurrent_loss, train_map)
from .vi import (KoopmanPosterior, MeanFieldGaussian, PriorSpec, elbo_estimate, load_posterior,
                 log_joint, posterior_mean_draw, sample_posterior, save_posterior, train_vi)
