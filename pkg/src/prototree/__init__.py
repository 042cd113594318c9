"""Prototype-routed soft decision trees for interpretable image recognition."""

from .autodiff import Tape, Tensor, backward
from .backbone import Backbone, BackboneConfig
from .data import AugmentConfig, Dataset, gen_synthetic, load_ppm, save_ppm
from .model import ProtoTreeModel, build_model
from .refine import PruneReport, ProjectionRecord, ensemble_predict, \
    fidelity, hard_predict, path_length_stats, project, prune
from .train import TrainConfig, fit
from .tree import LeafParams, PrototypeBank, RoutingTrace, TreeTopology, \
    edge_probability, init_tree, nearest_patch, predict, route

__all__ = [
    "AugmentConfig", "Backbone", "BackboneConfig", "Dataset", "LeafParams",
    "ProjectionRecord", "ProtoTreeModel", "PruneReport", "PrototypeBank",
    "RoutingTrace", "Tape", "Tensor", "TrainConfig", "TreeTopology",
    "backward", "build_model", "edge_probability", "ensemble_predict",
    "fidelity", "fit", "gen_synthetic", "hard_predict", "init_tree",
    "load_ppm", "nearest_patch", "path_length_stats", "predict", "project",
    "prune", "route", "save_ppm",
]
