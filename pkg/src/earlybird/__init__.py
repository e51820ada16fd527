"""Early-bird lottery tickets in plain numpy.

Train a dense network with an L1 penalty on batch-norm scales, watch the
global channel mask stabilise between epochs, prune at the first stable
window and retrain the small network.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import DataSplits, Dataset, load_dataset, load_splits, write_synthetic_mnist
from .detector import EBDetectionResult, EBDetector, retroactive_detect
from .errors import (
    CheckpointError, ConfigError, DataFormatError, DegenerateBatchError, DimensionError,
    EarlyBirdError, InputError, MaskError, NumericError, SpecError, TrainingError,
)
from .experiment import run_distances, run_experiment
from .model import (
    Conv, CostReport, GlobalAvgPool, Linear, MaxPool, Network, NetworkSpec,
    build_network, conv4, count_flops, count_params, vgg_mini,
)
from .pruning import (
    ChannelMask, ChannelScores, DistanceMatrix, apply_mask, compute_mask,
    distance_matrix, extract_gammas, mask_distance, network_mask,
)
from .train import (
    ExperimentReport, LRSchedule, TrainConfig, baseline_lt, eb_search, eb_train,
    quantize_sim, retrain_ticket,
)

__version__ = "0.1.0"
