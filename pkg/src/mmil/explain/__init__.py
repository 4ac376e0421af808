"""Rule extraction for bag networks: clustering, trees, fidelity and tracing."""

from .kmeans import KMeansResult, assign_labels, kmeans_fit
from .pipeline import (
    BestExplainer,
    Explainer,
    Representations,
    RuleExplainer,
    SurrogateModel,
    build_explainer,
    fidelity,
    find_best_explainer,
    frequencies,
    intermediate_representations,
    load_explainer,
    occurrences,
    rules_text,
    save_explainer,
    trace_prediction,
)
from .tree import DecisionTree, GiniTreeClassifier, RuleSet, extract_rules, tree_fit

__all__ = [
    "BestExplainer", "DecisionTree", "Explainer", "GiniTreeClassifier", "KMeansResult",
    "Representations", "RuleExplainer", "RuleSet", "SurrogateModel", "assign_labels",
    "build_explainer", "extract_rules", "fidelity", "find_best_explainer", "frequencies",
    "intermediate_representations", "kmeans_fit", "load_explainer", "occurrences",
    "rules_text", "save_explainer", "trace_prediction", "tree_fit",
]
