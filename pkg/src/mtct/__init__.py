"""Multi-task curriculum transfer learning for fine-grained attribute
recognition, implemented from scratch on CPU."""

from .engine import Tape, Tensor, backward, forward_op, tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .gradcheck import grad_check
from .model import (AttributeSchema, MTNModel, ThreeStreamModel, TrunkConfig,
                    apply_freeze, build_3mtn, build_mtn, clone_to_target,
                    forward_mtn, load_checkpoint, save_checkpoint)
from .losses import (LabelBatch, TSTEConfig, multitask_softmax_loss,
                     stage2_combined_loss, triplet_ranking_loss, tste_loss)
from .data import (DEFAULT_SCHEMA, Dataset, LatentGarment, NoiseProfile,
                   Sample, TripletBatch, generate_dataset, load_dataset,
                   render_sample, sample_triplets, save_dataset)
from .train import (Hyperparameters, RunRecord, sgd_step, train_regime,
                    train_stage1, train_stage2, triplet_satisfaction)
from .metrics import (ABSTAIN, MetricsReport, average_precision_cls,
                      evaluate_report, instance_precision_recall,
                      predict_attributes)

__version__ = "0.1.0"
