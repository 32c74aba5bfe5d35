"""One-shot pedestrian trajectory prediction with obstacle grids."""
from .data import SceneTable, Window, extract_windows, load_scene, parse_annotation, serialize_scene
from .evaluation import ade, fde, linear_baseline
from .model import ModelConfig, ModelParams, forward, backward, init_params, load_checkpoint, predict, save_checkpoint
from .obstacle import GridConfig, ObstacleGrid, ObstacleMethod, grid_to_patches, rasterize
from .preprocess import InputForm, decode_adjacent_diffs, encode, pearson
from .training import TrainConfig, train

__version__ = "0.1.0"
