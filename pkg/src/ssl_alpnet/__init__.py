"""Self-supervised few-shot segmentation with superpixel pseudolabels and ALPNet."""

from ._accel import NUMBA_ENABLED
from .data import Volume, make_phantom_dataset, partition
from .evaluation import assign_chunks, dice, evaluate_class, run_evaluation
from .losses import LossConfig, alignment_loss, seg_loss, total_loss
from .model import ALPNet, AlpConfig, Encoder, build_ensemble, fuse_class, predict, similarity_map
from .superpixel import SuperpixelConfig, build_pseudolabel_set, labelmap_to_masks, segment_slice
from .train import TrainConfig, learning_rate, train
from .transforms import TransformConfig, apply_gamma, sample_geometric, warp

__version__ = "0.1.0"
