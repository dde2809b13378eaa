"""Gradient-matching text reconstruction attacks (TAG and DLG) on a numpy transformer."""

from tagleak.attack import AttackConfig, AttackTrace, gradient_distance, project_to_tokens, run_attack
from tagleak.metrics import EvalReport, evaluate
from tagleak.model import ModelConfig, TransformerClassifier, model_gradient, preset
from tagleak.weights import InitSpec, init_weights, load_weights, save_weights

__version__ = "0.1.0"
