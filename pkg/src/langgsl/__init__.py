"""Mutual learning of a text classifier and a graph structure learner.

A local model (an MLP over text features) and a graph model (a GCN with
optional learnable edge weights) are trained in alternation, each consuming
the other's pseudo-labels on unlabeled nodes.
"""
from .attack import AttackSpec, perturb_edges, robustness_sweep
from .cleaning import (CleanedText, LlmCache, PromptTemplate, clean_texts, load_template,
                       parse_llm_response, render_prompt)
from .config import RunConfig, TrainConfig, derive_seed
from .data import (UNLABELED, SplitMasks, SyntheticConfig, TextAttributedGraph, edge_homophily,
                   load_dataset, make_synthetic_tag, save_dataset, split_nodes)
from .features import TextFeaturizer, build_vocabulary, tfidf_features
from .graph import KNNGraph, build_knn_graph, fuse_graphs, normalize_adjacency
from .gslm import GCNClassifier, gcn_forward, graph_refine_loss, train_gslm_phase
from .local_model import TextMLPClassifier, lm_forward, train_lm_phase
from .mutual import (LangGSLClassifier, elbo_estimate, evaluate, fit_langgsl,
                     run_decoupled_baselines, run_langgsl, vanilla_gcn)

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "CleanedText", "GCNClassifier", "KNNGraph", "LangGSLClassifier", "LlmCache",
    "PromptTemplate", "RunConfig", "SplitMasks", "SyntheticConfig", "TextAttributedGraph",
    "TextFeaturizer", "TextMLPClassifier", "TrainConfig", "UNLABELED", "build_knn_graph",
    "build_vocabulary", "clean_texts", "derive_seed", "edge_homophily", "elbo_estimate",
    "evaluate", "fit_langgsl", "fuse_graphs", "gcn_forward", "graph_refine_loss", "lm_forward",
    "load_dataset", "load_template", "make_synthetic_tag", "normalize_adjacency",
    "parse_llm_response", "perturb_edges", "render_prompt", "robustness_sweep",
    "run_decoupled_baselines", "run_langgsl", "save_dataset", "split_nodes", "tfidf_features",
    "train_gslm_phase", "train_lm_phase", "vanilla_gcn",
]
