"""Keypoint-only group activity recognition with dynamic composition and interaction modules."""
from .config import ModelConfig, TrainConfig
from .model import DynamicFormer
from .scene import Clip, LabelSpace, load_clip, save_clip

__all__ = ["ModelConfig", "TrainConfig", "DynamicFormer", "Clip", "LabelSpace", "load_clip", "save_clip"]
