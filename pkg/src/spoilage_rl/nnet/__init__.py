"""Hand-rolled neural-network kit: layers, Q-network stacks, optimizers.

Everything is float64 numpy. Forward passes cache what exact
backpropagation through time needs; gradients live in flat vectors that
mirror each network's parameter layout, so optimizers are single
vector operations.
"""

from .layers import (
    Activation,
    DenseParams,
    LstmParams,
    RnnParams,
    ShapeMismatchError,
    dense_forward,
    lstm_forward,
    rnn_forward,
)
from .network import (
    EmptyBatchError,
    InputLayout,
    MissingCacheError,
    NonFiniteValueError,
    QNetworkParams,
    Topology,
    TransitionBatch,
    backward,
    build_qnet,
    encode_observations,
    grad_check,
    qnet_forward,
    qnet_forward_cached,
    td_loss,
)
from .optim import AdamConfig, OptimizerState, SgdConfig, optimizer_step
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Activation",
    "AdamConfig",
    "DenseParams",
    "EmptyBatchError",
    "InputLayout",
    "LstmParams",
    "MissingCacheError",
    "NonFiniteValueError",
    "OptimizerState",
    "QNetworkParams",
    "RnnParams",
    "SgdConfig",
    "ShapeMismatchError",
    "Topology",
    "TransitionBatch",
    "backward",
    "build_qnet",
    "dense_forward",
    "encode_observations",
    "grad_check",
    "load_checkpoint",
    "lstm_forward",
    "optimizer_step",
    "qnet_forward",
    "qnet_forward_cached",
    "rnn_forward",
    "save_checkpoint",
    "td_loss",
]
