"""Wideband RF radiance fields with frequency-embedded 3D Gaussian splatting."""
from .dataset import DatasetManifest, SplitSpec, load_manifest, split
from .estimator import WidebandGaussianField
from .gaussians import GaussianCloud, init_from_points, project
from .metrics import l1_ssim_loss, ssim
from .oracle import PasImage, PropPath, generate_dataset, simulate_sample, trace_paths
from .renderer import RenderConfig, render
from .scene import Scene, load_scene, room, write_scene
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "GaussianCloud", "PasImage", "PropPath", "RenderConfig", "Scene",
    "SplitSpec", "TrainConfig", "WidebandGaussianField", "evaluate", "generate_dataset",
    "init_from_points", "l1_ssim_loss", "load_checkpoint", "load_manifest", "load_scene",
    "project", "render", "room", "save_checkpoint", "simulate_sample", "split", "ssim",
    "trace_paths", "write_scene",
]
