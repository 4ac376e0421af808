"""Multi-multi-instance learning: bag-layer networks, rule explanations and graph adapters."""

from .bagdata import (
    Bag,
    DatasetError,
    MILDataset,
    MMILDataset,
    TopBag,
    flatten,
    generate_seven_not_three,
    load_dataset,
    save_dataset,
    validate,
)
from .estimator import BagNetworkClassifier, FlattenBags
from .explain import RuleExplainer, find_best_explainer, fidelity, trace_prediction
from .netcore import NetworkSpec, build_network, forward, load_model, save_model
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Bag", "BagNetworkClassifier", "DatasetError", "FlattenBags", "MILDataset", "MMILDataset",
    "NetworkSpec", "RuleExplainer", "TopBag", "TrainConfig", "build_network", "fidelity",
    "find_best_explainer", "flatten", "forward", "generate_seven_not_three", "load_dataset",
    "load_model", "save_dataset", "save_model", "trace_prediction", "train", "validate",
]
