"""Dual-encoder lesion segmentation with relation-consistency training."""

from .data import (
    ConfigError, DatasetSplit, DomainTag, LesionFamily, PhantomConfig, PreprocessConfig, Sample,
    generate_phantom_dataset, make_folds, preprocess, sample_batch_pair,
)
from .dataio import load_dataset, save_dataset
from .losses import (
    LossBundle, RampSchedule, cross_entropy_loss, dice_loss, ramp_lambda, rc_general_loss, rc_target_loss, seg_loss,
)
from .metrics import MetricReport, MissingSpacingError, case_metrics, dsc, nsd, sen_spec_mae
from .network import ArchitectureSpec, DualEncoderNet, build_network, unet2d, unet3d, tiny
from .relation import compute_relation, load_relation, save_relation
from .trainer import (
    MODES, NonFiniteLossError, TrainConfig, evaluate, init_state, load_checkpoint, save_checkpoint,
    semi_step, sliding_window_predict, train, train_step,
)

__version__ = "0.1.0"
