"""Multi-behavior recommender with invariant preference learning.

The pipeline: ingest multi-behavior interaction logs, propagate embeddings
over behavior-union graphs (one per environment), extract invariant user
preferences with a shared encoder/decoder trained under a cross-environment
risk constraint, and rank target-behavior recommendations from the combined
invariant and target-specific preferences.
"""

from .dataset import (BehaviorMatrix, InteractionLog, SplitBundle, build_matrix,
                      cold_start_split, deduplicate, leave_one_out_split,
                      load_interactions, merge_matrices)
from .environments import (EnvironmentRepresentations, EnvironmentSet,
                           build_environment_graphs, enumerate_environments,
                           environment_representations)
from .errors import (CheckpointError, ConfigError, DataError, InvrecError,
                     NumericError, ParseError, SchemaError)
from .evaluator import EvalResult, evaluate, hr_ndcg_at_k, rank_of
from .graph import (PropagationGraph, aggregate_layers, build_graph, propagate,
                    propagate_sum)
from .losses import (LossReport, LossWeights, bpr_loss, contrastive_loss,
                     infonce, irm_loss, kl_loss, orthogonal_loss, total_loss)
from .recommender import (ScoringState, aggregate_invariant, aggregate_items,
                          build_scoring_state, score, score_items, top_k)
from .synthgen import SynthSpec, SynthTruth, generate, load_truth, save_truth
from .trainer import (GradCheckReport, ModelState, TrainConfig, Trainer,
                      adam_step, gradient_check, init_model, train_epoch)
from .vae import (GaussianLatent, PreferenceBundle, VaeParams, behavior_specific,
                  decode, encode, generate_bundle, init_params, reparameterize)

__version__ = "0.1.0"
