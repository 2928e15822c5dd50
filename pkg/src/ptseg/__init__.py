"""Point-cloud semantic segmentation with input- and output-level context."""
from .autodiff import Tape, Tensor, precision
from .blocking import SamplerConfig, grid_groups, multiscale_sample, split_into_blocks
from .evaluation import ConfusionMatrix, accumulate, iou_per_class, kfold_split, summary
from .models import ModelConfig, forward, init_params
from .pointcloud import LabeledPointCloud, load_cloud, save_cloud
from .training import TrainConfig, predict_scene, train

__version__ = "0.1.0"
