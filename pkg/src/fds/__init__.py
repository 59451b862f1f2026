"""Pseudo-domain synthesis for domain generalization.

Train one class-and-domain-conditioned diffusion model over the source
domains, synthesize samples from interpolated domain conditions, keep the
correctly-classified high-entropy ones, and retrain a classifier on the
augmented set under a leave-one-out protocol.
"""

__version__ = "0.1.0"

from .data import (DomainGeometry, MultiDomainDataset, Sample, SplitPlan,
                   in_domain_split, ingest_image_folder, leave_one_out_split,
                   make_gaussian_domains, make_styled_shapes, oracle_split)
from .diffusion import (ConditionEmbedding, DiffusionConfig, DiffusionModel,
                        NoiseSchedule, SamplerConfig, cfg_combine, ddim_sample,
                        diffusion_loss, encode_condition, forward_noise,
                        make_schedule, train_diffusion)
from .errors import ConfigError, FdsError, IntegrityError, LeakageError, StageError
from .experiment import (FilterSettings, MethodConfig, in_domain_experiment,
                         leave_one_out_experiment)
from .filtering import (FilterVerdict, PredictionRecord, assemble_augmented,
                        entropy, filter_ablation_mode, score_pool, select,
                        train_feedback_classifier)
from .metrics import (DiversityConfig, DiversityScore, diversity_shift,
                      features_for_metric, project_embeddings)
from .mixing import (MixPolicy, MixRequest, SamplePool, SyntheticSample,
                     condition_interpolate, generate_pool, generate_pure_pool,
                     sample_condition_level, sample_noise_level)
from .training import (Classifier, RunReport, SwadPolicy, TrainerConfig,
                       TrainRun, cross_entropy_loss, evaluate, swad_average,
                       train_erm)
from .config import RunConfig, load_config, parse_config
from .pipeline import ablation_suite, run_pipeline, sweep_nl
from .rundir import RunDirectory
