"""Intermittency-aware training: networks, dropout policies, masked updates, fine-tuning."""

from .modelio import config_from_dict, config_to_dict, load_model, model_from_dict, model_to_dict, save_model
from .network import (
    Activation,
    AvgPool,
    Conv2D,
    Dense,
    DWSConv2D,
    Network,
    build_cnn,
    build_mlp,
    loss_and_grad,
    quantize_rows,
)
from .policies import (
    DropoutPolicy,
    MaskSample,
    PolicyKind,
    compute_probs,
    hard_mask,
    hessian_diag,
    hessian_diag_fn,
    probs_fmre,
    probs_l2,
    probs_obd,
    probs_taylor,
    sample_mask,
    shapley_exact,
    shapley_probs,
    sparse_mask_step,
)
from .training import (
    EnergyContext,
    QuantAssignment,
    TrainConfig,
    TrainResult,
    UpdateTracker,
    finetune,
    layer_plans,
    optimize_bits,
    quant_penalty_loss,
    select_undertrained,
    train,
    train_step,
    update_ratio,
)


def forward(net, x, mask=None, quant=None, gates=None):
    """Network output with per-layer masks (dict or ``MaskSample`` values) and bit widths."""
    if mask:
        mask = {i: (m.m if isinstance(m, MaskSample) else m) for i, m in mask.items()}
    return net.forward(x, mask, quant, gates)


def backward(net, x, target):
    """Per-weight gradients of the configured loss, keyed by ``(layer, param)``."""
    return net.loss_and_grads(x, target)[1]
