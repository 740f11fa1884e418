"""Toy multi-scale 3D CNN that turns SFV1 volumes into probability maps."""

__version__ = "0.1.0"

from .net import NetSpec, ProbMapNet, build_net, dice_loss
from .sfv import SfvError, Volume, read_volume, write_volume
from .train import TrainConfig, hard_dice, load_checkpoint, predict, predict_file, save_checkpoint, train
