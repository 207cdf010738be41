"""Differentiable view synthesis and desk-scale self-supervised depth optimization."""

__version__ = "0.1.0"

from .errors import (ContractError, DegenerateInputError, EvaluationError, FormatError, InvalidDepthError,
                     NumericError, SceneSpecError)
from .geometry import CameraModel, PoseParams
from .objective import ObjectiveConfig, SceneParams, SnippetLoss, snippet_gradient, snippet_loss
from .optimizer import NadamConfig, OptimizerState

__all__ = [
    "CameraModel", "PoseParams", "ObjectiveConfig", "SceneParams", "SnippetLoss", "snippet_loss",
    "snippet_gradient", "NadamConfig", "OptimizerState", "ContractError", "DegenerateInputError",
    "EvaluationError", "FormatError", "InvalidDepthError", "NumericError", "SceneSpecError",
]
