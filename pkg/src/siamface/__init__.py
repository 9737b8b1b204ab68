"""Siamese-CNN face verification: model, training, vector store and services."""

from .model import FaceImage, SiameseNet, forward_once, forward_pair, load_checkpoint, new_siamese, save_checkpoint
from .numerics import euclidean_distance
from .store import FaceDb, IdentityRecord, Match

__all__ = [
    "FaceDb", "FaceImage", "IdentityRecord", "Match", "SiameseNet", "euclidean_distance",
    "forward_once", "forward_pair", "load_checkpoint", "new_siamese", "save_checkpoint",
]
__version__ = "0.1.0"
