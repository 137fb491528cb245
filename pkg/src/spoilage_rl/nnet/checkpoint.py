"""Network checkpoints as npz archives.

The archive stores the topology tag, the build dimensions, the two build
flags, and the raw float64 parameter vector. Loading rebuilds the network
shell and copies the vector back, so load(save(net)) is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..domain import DataError
from .layers import Activation
from .network import QNetworkParams, Topology, build_qnet

_FORMAT_VERSION = 1


def save_checkpoint(params: QNetworkParams, path) -> None:
    path = Path(path)
    np.savez(
        path,
        format_version=np.int64(_FORMAT_VERSION),
        topology=np.str_(params.topology.value),
        input_size=np.int64(params.input_size),
        hidden_size=np.int64(params.hidden_size),
        seq_len=np.int64(params.seq_len),
        n_actions=np.int64(params.n_actions),
        peephole_previous_cell=np.int64(params.peephole_previous_cell),
        rnn_activation=np.str_(params.rnn_activation.value),
        theta=params.theta,
    )


def load_checkpoint(path) -> QNetworkParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            version = int(archive["format_version"])
            if version != _FORMAT_VERSION:
                raise DataError(f"unsupported checkpoint version {version}")
            params = build_qnet(
                topology=Topology(str(archive["topology"])),
                input_size=int(archive["input_size"]),
                hidden_size=int(archive["hidden_size"]),
                seq_len=int(archive["seq_len"]),
                n_actions=int(archive["n_actions"]),
                rng=None,
                peephole_previous_cell=bool(int(archive["peephole_previous_cell"])),
                rnn_activation=Activation(str(archive["rnn_activation"])),
            )
            theta = archive["theta"]
            if theta.shape != params.theta.shape:
                raise DataError(
                    f"checkpoint parameter count {theta.shape} does not match "
                    f"the declared dimensions {params.theta.shape}"
                )
            params.theta[:] = theta
            return params
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
