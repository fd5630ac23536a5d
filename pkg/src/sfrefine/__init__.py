"""Reward-predictive state abstractions from offline trajectory data."""

from .agents import AgentConfig, LearningCurve, run_agent, run_transfer_suite
from .approx import (Classifier, FitConfig, KnnClassifier, LabeledSaDataset,
                     MlpClassifier, TabularClassifier, classifier_from_blob,
                     classifier_to_blob, fit_classifier, predict_class,
                     predict_distribution)
from .data import (Observation, TrajectoryDataset, Transition,
                   read_dataset_csv, write_dataset_csv)
from .envs import (EnvSpec, EnvSpecError, Environment, TabularModel,
                   enumerate_ground_states, make_env, sample_trajectories)
from .evaluate import (ConfusionMatrix, LatentModel, check_sub_clustering,
                       confusion_matrix, latent_model_from_refinement,
                       latent_model_from_tabular, oracle_partition,
                       predict_reward_sequence, projection_matrix,
                       reward_sequence_error)
from .lsfm import (ClusterAssignment, Lsfm, build_lsfm, compute_f_matrices,
                   estimate_reward_vectors, estimate_transition_matrices,
                   monte_carlo_sf, predict_sf, predict_sf_dataset)
from .refine import (RefineConfig, RefineResult, TraceEntry, bin_rewards,
                     epsilon_cluster, filter_spurious, initial_clustering,
                     refine_to_fixpoint, reward_refine, sf_refine)

__version__ = "0.1.0"
