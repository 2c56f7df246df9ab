"""Hierarchical prototype encoder, its losses, and gradient verification."""

from panofocus.prototyper.autograd import Tensor, parameter
from panofocus.prototyper.gradcheck import (
    DeskProblem,
    NondeterministicLoss,
    build_desk_problem,
    gradient_check,
    gradient_check_all,
)
from panofocus.prototyper.losses import (
    LossReport,
    detection_loss,
    greedy_assign,
    recognition_loss,
    same_group_matrix,
    total_loss,
)
from panofocus.prototyper.model import (
    Hierarchy,
    PrototypeBank,
    PrototyperConfig,
    TokenMatrix,
    UBEWeights,
    cme_top_down,
    forward_bipropagate,
    init_params,
    parameter_shapes,
    prototype_attention,
    prototype_bank,
    recognition_heads,
    ube_bottom_up,
    ube_weights,
    ume_self_attention,
    validate_params,
)

__all__ = [
    "DeskProblem", "Hierarchy", "LossReport", "NondeterministicLoss", "PrototypeBank",
    "PrototyperConfig", "Tensor", "TokenMatrix", "UBEWeights", "build_desk_problem",
    "cme_top_down", "detection_loss", "forward_bipropagate", "gradient_check",
    "gradient_check_all", "greedy_assign", "init_params", "parameter", "parameter_shapes",
    "prototype_attention", "prototype_bank", "recognition_heads", "recognition_loss",
    "same_group_matrix", "total_loss", "ube_bottom_up", "ube_weights", "ume_self_attention",
    "validate_params",
]
