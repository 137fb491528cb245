"""Q-network stacks over a single flat parameter vector.

A QNetworkParams owns one contiguous float64 vector `theta`; every layer
weight is a reshaped view into it, laid out block by block in stack order.
Gradients come back as a plain vector of the same length, which makes the
optimizers single-array operations and checkpoints trivial.

Four stack shapes are supported (final output width is one Q-value per
action):

    hybrid : LSTM(H) -> RNN(H) -> Dense(A)
    lstm   : LSTM(H) -> Dense(A)
    rnn    : RNN(H)  -> Dense(A)
    ann    : Dense(H, relu) -> Dense(H, relu) -> Dense(A)

Recurrent stacks consume observation sequences (batch, time, features) with
hidden state starting at zero on every call; the dense head reads the last
hidden step. The ann stack consumes the flattened sequence.

The finite-difference checker has two interchangeable engines: a plain
serial loop (two full forwards per parameter, used as the reference on
small nets) and a vectorized engine that evaluates hundreds of perturbed
copies per pass. The vectorized engine exploits that all copies share the
base weights: each GEMM runs once over a (lanes * batch) block, and the
single perturbed entry of lane k is restored exactly as a rank-1
correction, since (W + eps * E_rc) x differs from W x only by eps * x[c]
added to output row r. The two engines agree to rounding error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..domain import DataError, SpoilageError
from .layers import (
    Activation,
    DenseParams,
    LstmParams,
    RnnParams,
    ShapeMismatchError,
    dense_backward,
    dense_forward_cached,
    lstm_backward,
    lstm_forward_cached,
    rnn_backward,
    rnn_forward_cached,
)


class MissingCacheError(SpoilageError):
    """backward() was handed a cache produced by a different network."""


class EmptyBatchError(SpoilageError):
    """The transition batch contains no rows."""


class NonFiniteValueError(SpoilageError):
    """A forward or backward pass produced NaN or infinity."""


class Topology(enum.Enum):
    HYBRID = "hybrid"
    LSTM_ONLY = "lstm"
    RNN_ONLY = "rnn"
    ANN = "ann"


class InputLayout(enum.Enum):
    """How a 5-feature observation row becomes a network input sequence."""

    SCALAR_SEQUENCE = "scalar-sequence"  # one feature per timestep: (5, 1)
    WINDOW = "window"  # trailing window of whole readings: (window, 5)


def encode_observations(
    obs: np.ndarray, layout: InputLayout = InputLayout.SCALAR_SEQUENCE, window: int = 5
) -> np.ndarray:
    """Encode an (N, F) observation matrix as (N, T, I) input sequences.

    SCALAR_SEQUENCE feeds each reading as F timesteps of width 1. WINDOW
    feeds, at row t, the readings t-window+1 .. t (clamped at the start, so
    early rows repeat row 0).
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2:
        raise ShapeMismatchError(f"expected (rows, features), got {obs.shape}")
    if layout is InputLayout.SCALAR_SEQUENCE:
        return obs[:, :, None]
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    n = obs.shape[0]
    offsets = np.arange(window) - (window - 1)
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, None)
    return obs[idx]


@dataclass(frozen=True)
class _Block:
    name: str  # e.g. "lstm0.w_x"
    layer: int  # position in the stack
    kind: str  # layer-local parameter name
    offset: int
    shape: tuple


@dataclass
class QNetworkParams:
    topology: Topology
    input_size: int
    hidden_size: int
    seq_len: int
    n_actions: int
    theta: np.ndarray
    layers: list
    blocks: list
    peephole_previous_cell: bool = False
    rnn_activation: Activation = Activation.TANH

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    @property
    def head(self) -> DenseParams:
        return self.layers[-1]

    def grad_views(self, flat: np.ndarray) -> dict:
        """Per-block views into a flat vector laid out like theta."""
        if flat.shape != self.theta.shape:
            raise ShapeMismatchError(
                f"expected a vector of length {self.size}, got {flat.shape}"
            )
        return {
            b.name: flat[b.offset : b.offset + int(np.prod(b.shape))].reshape(b.shape)
            for b in self.blocks
        }

    def astype(self, dtype) -> "QNetworkParams":
        """Copy with theta (and all layer views) cast to dtype.

        Refresh the copy from this network with np.copyto(copy.theta,
        self.theta, casting="same_kind"); useful for running the update
        math in float32 against float64 master weights.
        """
        theta = self.theta.astype(dtype)
        return QNetworkParams(
            topology=self.topology,
            input_size=self.input_size,
            hidden_size=self.hidden_size,
            seq_len=self.seq_len,
            n_actions=self.n_actions,
            theta=theta,
            layers=_assemble_layers(
                theta,
                self.blocks,
                self.topology,
                self.peephole_previous_cell,
                self.rnn_activation,
            ),
            blocks=self.blocks,
            peephole_previous_cell=self.peephole_previous_cell,
            rnn_activation=self.rnn_activation,
        )


def _block_specs(topology, input_size, hidden_size, seq_len, n_actions):
    h = hidden_size
    lstm = [
        ("w_x", (4 * h, input_size)),
        ("w_h", (4 * h, h)),
        ("w_c", (3 * h, h)),
        ("w_co", (h, h)),
        ("bias", (4 * h,)),
    ]

    def rnn(i):
        return [("w_xh", (h, i)), ("w_hh", (h, h)), ("b_h", (h,))]

    def dense(i, o):
        return [("w", (o, i)), ("b", (o,))]

    if topology is Topology.HYBRID:
        return [("lstm0", lstm), ("rnn1", rnn(h)), ("head", dense(h, n_actions))]
    if topology is Topology.LSTM_ONLY:
        return [("lstm0", lstm), ("head", dense(h, n_actions))]
    if topology is Topology.RNN_ONLY:
        return [("rnn0", rnn(input_size)), ("head", dense(h, n_actions))]
    flat_in = seq_len * input_size
    return [
        ("dense0", dense(flat_in, h)),
        ("dense1", dense(h, h)),
        ("head", dense(h, n_actions)),
    ]


def _assemble_layers(theta, blocks, topology, peephole_previous_cell, rnn_activation):
    """Layer parameter objects whose arrays are views into theta."""
    grouped: dict = {}
    prefix: dict = {}
    for b in blocks:
        view = theta[b.offset : b.offset + int(np.prod(b.shape))].reshape(b.shape)
        grouped.setdefault(b.layer, {})[b.kind] = view
        prefix[b.layer] = b.name.split(".", 1)[0]
    layers = []
    for index in range(len(grouped)):
        name = prefix[index]
        v = grouped[index]
        if name.startswith("lstm"):
            layers.append(
                LstmParams(peephole_previous_cell=peephole_previous_cell, **v)
            )
        elif name.startswith("rnn"):
            layers.append(RnnParams(activation=rnn_activation, **v))
        else:
            activation = (
                Activation.RELU
                if topology is Topology.ANN and index < len(grouped) - 1
                else Activation.IDENTITY
            )
            layers.append(DenseParams(activation=activation, **v))
    return layers


def build_qnet(
    topology: Topology,
    input_size: int = 1,
    hidden_size: int = 64,
    seq_len: int = 5,
    n_actions: int = 4,
    rng=None,
    peephole_previous_cell: bool = False,
    rnn_activation: Activation = Activation.TANH,
) -> QNetworkParams:
    """Allocate a network with seeded uniform +-1/sqrt(fan_in) weights.

    `rng` may be a numpy Generator, an int seed, or None (zeros). Weight
    matrices draw from the rng in block order; biases start at zero.
    """
    if min(input_size, hidden_size, seq_len, n_actions) < 1:
        raise DataError("network dimensions must be positive")
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    specs = _block_specs(topology, input_size, hidden_size, seq_len, n_actions)
    blocks = []
    offset = 0
    for layer_index, (layer_name, params) in enumerate(specs):
        for kind, shape in params:
            blocks.append(_Block(f"{layer_name}.{kind}", layer_index, kind, offset, shape))
            offset += int(np.prod(shape))
    theta = np.zeros(offset)

    if rng is not None:
        for b in blocks:
            if len(b.shape) == 2:
                view = theta[b.offset : b.offset + int(np.prod(b.shape))]
                bound = 1.0 / np.sqrt(b.shape[1])
                view[:] = (rng.random(b.shape) * (2.0 * bound) - bound).ravel()

    layers = _assemble_layers(
        theta, blocks, topology, peephole_previous_cell, rnn_activation
    )

    return QNetworkParams(
        topology=topology,
        input_size=input_size,
        hidden_size=hidden_size,
        seq_len=seq_len,
        n_actions=n_actions,
        theta=theta,
        layers=layers,
        blocks=blocks,
        peephole_previous_cell=peephole_previous_cell,
        rnn_activation=rnn_activation,
    )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class NetCache:
    params: QNetworkParams
    batch_size: int
    layer_caches: list
    q: np.ndarray


def _check_input(params: QNetworkParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=params.theta.dtype)
    if x.ndim == 2:
        x, squeezed = x[None], True
    elif x.ndim == 3:
        squeezed = False
    else:
        raise ShapeMismatchError(f"expected (time, features) or a batch, got {x.shape}")
    if x.shape[1:] != (params.seq_len, params.input_size):
        raise ShapeMismatchError(
            f"expected sequences of shape {(params.seq_len, params.input_size)}, "
            f"got {x.shape[1:]}"
        )
    return x, squeezed


def qnet_forward_cached(params: QNetworkParams, x: np.ndarray) -> NetCache:
    """Batched forward keeping every layer cache; input (B, T, I)."""
    x, _ = _check_input(params, x)
    caches = []
    if params.topology is Topology.ANN:
        cur = x.reshape(x.shape[0], -1)
        for layer in params.layers:
            cache = dense_forward_cached(layer, cur)
            caches.append(cache)
            cur = cache.h
        q = cur
    else:
        cur = x  # (B, T, I) at the bottom; (T, B, H) between recurrent layers
        for index, layer in enumerate(params.layers[:-1]):
            if isinstance(layer, LstmParams):
                cache = lstm_forward_cached(layer, cur)
            else:
                cache = rnn_forward_cached(layer, cur, time_major=index > 0)
            caches.append(cache)
            cur = cache.h
        cache = dense_forward_cached(params.layers[-1], cur[-1])
        caches.append(cache)
        q = cache.h
    if not np.isfinite(q).all():
        raise NonFiniteValueError("forward pass produced non-finite Q-values")
    return NetCache(params=params, batch_size=x.shape[0], layer_caches=caches, q=q)


def qnet_forward(params: QNetworkParams, x) -> np.ndarray:
    """Q-values for one observation sequence (4-vector) or a batch (B, 4)."""
    xb, squeezed = _check_input(params, x)
    q = qnet_forward_cached(params, xb).q
    return q[0] if squeezed else q


def backward(params: QNetworkParams, cache: NetCache, dq) -> np.ndarray:
    """Exact gradients of sum_b <dq_b, Q_b> w.r.t. theta, as a flat vector.

    dq is the loss gradient at the network output, (B, A) (a single (A,)
    vector is promoted). Reduction over the batch is a sum; scale dq for
    means.
    """
    if not isinstance(cache, NetCache) or cache.params is not params:
        raise MissingCacheError("cache does not belong to this network")
    dq = np.asarray(dq, dtype=params.theta.dtype)
    if dq.ndim == 1:
        dq = dq[None]
    if dq.shape != (cache.batch_size, params.n_actions):
        raise ShapeMismatchError(
            f"dq: expected {(cache.batch_size, params.n_actions)}, got {dq.shape}"
        )

    flat = np.zeros(params.size, dtype=params.theta.dtype)
    views = params.grad_views(flat)

    def outs(layer_index):
        return {b.kind: views[b.name] for b in params.blocks if b.layer == layer_index}

    last = len(params.layers) - 1
    if params.topology is Topology.ANN:
        cur = dq
        for index in range(last, -1, -1):
            cur = dense_backward(
                params.layers[index], cache.layer_caches[index], cur, outs(index)
            )
    else:
        dh_last = dense_backward(
            params.layers[last], cache.layer_caches[last], dq, outs(last)
        )
        t = params.seq_len
        b = cache.batch_size
        h = params.hidden_size
        dh_seq = np.zeros((t, b, h), dtype=params.theta.dtype)
        dh_seq[-1] = dh_last  # only the final step feeds the head
        for index in range(last - 1, -1, -1):
            layer = params.layers[index]
            if isinstance(layer, LstmParams):
                dx = lstm_backward(
                    layer, cache.layer_caches[index], dh_seq, outs(index),
                    need_dx=index > 0, dx_time_major=True,
                )
            else:
                dx = rnn_backward(
                    layer, cache.layer_caches[index], dh_seq, outs(index),
                    need_dx=index > 0, dx_time_major=True,
                )
            dh_seq = dx
    if not np.isfinite(flat).all():
        raise NonFiniteValueError("backward pass produced non-finite gradients")
    return flat


# ---------------------------------------------------------------------------
# TD loss


@dataclass(frozen=True)
class TransitionBatch:
    """Encoded transitions: obs/next_obs are (B, T, I), the rest (B,)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray


def _frozen_targets(params, batch, gamma) -> np.ndarray:
    q_next = qnet_forward_cached(params, batch.next_obs).q
    live = 1.0 - batch.done.astype(np.float64)
    return batch.rewards + gamma * q_next.max(axis=1) * live


def _loss_and_grads_at_targets(params, obs, actions, targets):
    cache = qnet_forward_cached(params, obs)
    n = obs.shape[0]
    rows = np.arange(n)
    diff = cache.q[rows, actions] - targets
    loss = float(diff @ diff) / n
    dq = np.zeros((n, params.n_actions), dtype=params.theta.dtype)
    dq[rows, actions] = 2.0 * diff / n
    return loss, backward(params, cache, dq)


def td_loss(params: QNetworkParams, batch: TransitionBatch, gamma: float):
    """One-step TD loss and its semi-gradient.

    Per transition the target is y = r + gamma * max_a' Q(s', a') using the
    SAME parameters (no separate target copy), and just y = r on terminal
    rows; the loss is the batch mean of (y - Q(s, a))^2. The target is a
    constant during differentiation.
    """
    n = np.asarray(batch.obs).shape[0]
    if n == 0:
        raise EmptyBatchError("transition batch is empty")
    if not 0.0 <= gamma < 1.0:
        raise DataError(f"gamma must be in [0, 1), got {gamma}")
    targets = _frozen_targets(params, batch, gamma)
    loss, grads = _loss_and_grads_at_targets(
        params, batch.obs, np.asarray(batch.actions), targets
    )
    if not np.isfinite(loss):
        raise NonFiniteValueError("TD loss is non-finite")
    return loss, grads


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(
    params: QNetworkParams,
    batch: TransitionBatch,
    gamma: float = 0.95,
    fd_epsilon: float = 1e-5,
    method: str = "auto",
    analytic: np.ndarray | None = None,
    lane_chunk: int = 512,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The objective differentiated is the TD loss with its bootstrap targets
    frozen at the current parameters, i.e. exactly the function whose
    semi-gradient td_loss reports. Relative error per entry uses a
    max(1, |analytic|, |numeric|) denominator. `analytic` can be injected
    to audit a foreign gradient; `method` picks the serial reference loop
    or the vectorized lane engine ("auto" selects by parameter count).

    Caveat for relu stacks: a pre-activation sitting exactly on the kink
    (which zero-initialised biases make certain whenever an entire relu row
    dies in the layer below) has no two-sided derivative, so the difference
    quotient legitimately reports roughly half the downstream gradient
    there. That is a property of the function, not an engine disagreement;
    both engines and the serial reference produce identical values.
    """
    if not 1e-6 <= fd_epsilon <= 1e-4:
        raise DataError(f"fd_epsilon must be within [1e-6, 1e-4], got {fd_epsilon}")
    if method not in ("auto", "serial", "vectorized"):
        raise DataError(f"unknown grad_check method {method!r}")
    obs, _ = _check_input(params, batch.obs)
    actions = np.asarray(batch.actions)
    targets = _frozen_targets(params, batch, gamma)
    if analytic is None:
        _, analytic = _loss_and_grads_at_targets(params, obs, actions, targets)
    if method == "auto":
        method = "serial" if params.size <= 1500 else "vectorized"
    if method == "serial":
        numeric = _fd_serial(params, obs, actions, targets, fd_epsilon)
    else:
        numeric = _fd_vectorized(params, obs, actions, targets, fd_epsilon, lane_chunk)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def _objective(params, obs, actions, targets) -> float:
    q = qnet_forward_cached(params, obs).q
    diff = q[np.arange(obs.shape[0]), actions] - targets
    return float(diff @ diff) / obs.shape[0]


def _fd_serial(params, obs, actions, targets, eps) -> np.ndarray:
    theta = params.theta
    grad = np.empty(params.size)
    for j in range(params.size):
        saved = theta[j]
        theta[j] = saved + eps
        f_plus = _objective(params, obs, actions, targets)
        theta[j] = saved - eps
        f_minus = _objective(params, obs, actions, targets)
        theta[j] = saved
        grad[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad


# -- vectorized engine ------------------------------------------------------
#
# A "lane" is one perturbed copy of the network. Chunks are grouped by
# layer: layers below the perturbed one run once on the unperturbed
# parameters (shared across lanes), the perturbed layer applies rank-1
# corrections, and layers above run per-lane (their inputs differ) but
# still with shared weight matrices, so every GEMM stays one large matmul.
# Scratch buffers are reused across chunks through a keyed workspace, and
# the activations write through preallocated `out=` arrays; at these array
# sizes allocation and extra passes cost more than the arithmetic.


class _Workspace(dict):
    def buf(self, key, shape):
        arr = super().get(key)
        if arr is None or arr.shape != shape:
            arr = np.empty(shape)
            self[key] = arr
        return arr


def _fast_sigmoid(a, out):
    # 1/(1+exp(-a)); the far-negative tail overflows exp but rounds to the
    # correct limit 0, so only the warning needs suppressing
    np.negative(a, out=out)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def _apply_correction(target, corr, source):
    """target[lane, :, row] += eps * source[..., col] for each lane."""
    if corr is None:
        return
    ls, rs, cs, es = corr
    if source.ndim == 2:
        target[ls, :, rs] += es[:, None] * source[:, cs].T
    else:
        target[ls, :, rs] += es[:, None] * source[ls, :, cs]


def _apply_bias_correction(target, corr):
    if corr is None:
        return
    ls, rs, _, es = corr
    target[ls, :, rs] += es[:, None]


def _laned_lstm(p: LstmParams, x_steps, corr, lanes, batch, collect_all, ws, tag):
    # the LSTM only ever sits first in a stack, so its inputs are shared
    hsz = p.hidden_size
    w_ht, w_ct, w_cot = p.w_h.T, p.w_c.T, p.w_co.T
    corr = corr or {}
    steps = len(x_steps)
    lb = lanes * batch
    base = ws.get((tag, "base"))
    if base is None:
        # shared input projection, identical for every chunk of this layer
        base = [x @ p.w_x.T + p.bias for x in x_steps]
        ws[(tag, "base")] = base

    a = ws.buf((tag, "a"), (lanes, batch, 4 * hsz))
    # the recurrent products, the shared input projection and the cell
    # peephole all collapse into one product of [h | c | batch one-hot]
    # against a combined matrix whose trailing rows are swapped per step
    f_shape = (lanes, batch, 2 * hsz + batch)
    fresh = ws.get((tag, "fused")) is None or ws[(tag, "fused")].shape != f_shape
    fused = ws.buf((tag, "fused"), f_shape)
    if fresh:
        fused[:, :, 2 * hsz :] = 0.0
        fused[:, np.arange(batch), 2 * hsz + np.arange(batch)] = 1.0
    wcomb = ws.get((tag, "wcomb"))
    if wcomb is None:
        wcomb = np.zeros((2 * hsz + batch, 4 * hsz))
        wcomb[:hsz] = w_ht
        wcomb[hsz : 2 * hsz, : 3 * hsz] = w_ct
        ws[(tag, "wcomb")] = wcomb
    gates = [ws.buf((tag, "gate", i), (lanes, batch, hsz)) for i in range(4)]
    i_t, f_t, g_t, o_t = gates
    tmp = ws.buf((tag, "tmp"), (lanes, batch, hsz))
    tanh_c = ws.buf((tag, "tanh_c"), (lanes, batch, hsz))
    ao = ws.buf((tag, "ao"), (lanes, batch, hsz))
    h = ws.buf((tag, "h0"), (lanes, batch, hsz))
    c = ws.buf((tag, "c0"), (lanes, batch, hsz))
    c_next = ws.buf((tag, "c1"), (lanes, batch, hsz))
    n_out = steps if collect_all else 1
    outs = [ws.buf((tag, "out", t), (lanes, batch, hsz)) for t in range(n_out)]

    # Chunks that perturb only weights whose correction source is still zero
    # at the first step (h for W_h, c for W_c, and c_prev for W_co in the
    # previous-cell variant) leave every lane identical to the unperturbed
    # net there, so the first step collapses to one batch-sized evaluation
    # and the second step's recurrent products are shared as well.
    quiet = {"w_h", "w_c"} | ({"w_co"} if p.peephole_previous_cell else set())
    h_shared = c_shared = None
    t_start = 0
    if corr and set(corr) <= quiet and steps > 1:
        b0 = base[0]
        i0 = _fast_sigmoid(b0[:, :hsz], out=np.empty((batch, hsz)))
        c_shared = i0 * np.tanh(b0[:, 2 * hsz : 3 * hsz])
        ao0 = b0[:, 3 * hsz :].copy()
        if not p.peephole_previous_cell:
            ao0 += c_shared @ w_cot
        h_shared = _fast_sigmoid(ao0, out=ao0) * np.tanh(c_shared)
        if collect_all:
            np.copyto(outs[0], h_shared)
        t_start = 1

    for t in range(t_start, steps):
        shared_step = t == 1 and h_shared is not None
        if t == 0:
            # both recurrent states are zero, so the W_h, W_c and (for the
            # previous-cell variant) W_co products vanish along with their
            # rank-1 corrections
            np.copyto(a, base[0])
            _apply_correction(a, corr.get("w_x"), x_steps[0])
            _apply_bias_correction(a, corr.get("bias"))
        elif shared_step:
            a_sh = base[1] + h_shared @ w_ht
            a_sh[:, : 3 * hsz] += c_shared @ w_ct
            np.copyto(a, a_sh)
            _apply_correction(a, corr.get("w_h"), h_shared)
            _apply_correction(a, corr.get("w_c"), c_shared)
        else:
            fused[:, :, :hsz] = h
            fused[:, :, hsz : 2 * hsz] = c
            wcomb[2 * hsz :] = base[t]
            np.matmul(
                fused.reshape(lb, -1), wcomb, out=a.reshape(lb, 4 * hsz)
            )
            _apply_correction(a, corr.get("w_x"), x_steps[t])
            _apply_correction(a, corr.get("w_h"), h)
            _apply_correction(a, corr.get("w_c"), c)
            _apply_bias_correction(a, corr.get("bias"))
        _fast_sigmoid(a[:, :, 0:hsz], out=i_t)
        np.tanh(a[:, :, 2 * hsz : 3 * hsz], out=g_t)
        if t == 0:
            # f multiplies a zero cell, so its sigmoid is skipped too
            np.multiply(i_t, g_t, out=c_next)
        else:
            c_in = c_shared if shared_step else c
            _fast_sigmoid(a[:, :, hsz : 2 * hsz], out=f_t)
            np.multiply(f_t, c_in, out=c_next)
            np.multiply(i_t, g_t, out=tmp)
            c_next += tmp
        if p.peephole_previous_cell:
            c_peep = c_shared if shared_step else c
        else:
            c_peep = c_next
        if t == 0 and p.peephole_previous_cell:
            np.copyto(ao, a[:, :, 3 * hsz :])
        elif c_peep.ndim == 2:
            np.copyto(ao, c_peep @ w_cot)
            ao += a[:, :, 3 * hsz :]
            _apply_correction(ao, corr.get("w_co"), c_peep)
        else:
            np.matmul(c_peep.reshape(lb, hsz), w_cot, out=ao.reshape(lb, hsz))
            ao += a[:, :, 3 * hsz :]
            _apply_correction(ao, corr.get("w_co"), c_peep)
        _fast_sigmoid(ao, out=o_t)
        np.tanh(c_next, out=tanh_c)
        h_out = outs[t] if collect_all else outs[0]
        np.multiply(o_t, tanh_c, out=h_out)
        h = h_out
        c, c_next = c_next, c
    return outs if collect_all else outs[0]


def _laned_rnn(p: RnnParams, x_steps, corr, lanes, batch, collect_all, ws, tag):
    hsz = p.hidden_size
    corr = corr or {}
    steps = len(x_steps)
    lb = lanes * batch
    shared_x = x_steps[0].ndim == 2
    base = None
    if shared_x:
        base = ws.get((tag, "base"))
        if base is None:
            base = [x @ p.w_xh.T + p.b_h for x in x_steps]
            ws[(tag, "base")] = base

    a = ws.buf((tag, "a"), (lanes, batch, hsz))
    tmp = ws.buf((tag, "tmp"), (lanes, batch, hsz))
    h = ws.buf((tag, "h0"), (lanes, batch, hsz))
    n_out = steps if collect_all else 1
    outs = [ws.buf((tag, "out", t), (lanes, batch, hsz)) for t in range(n_out)]
    w_hht = p.w_hh.T
    w_xht = p.w_xh.T

    # chunks perturbing only w_hh see no divergence at the first step (its
    # correction source is the zero initial state), so that step collapses
    # to the unperturbed batch evaluation
    h_shared = None
    t_start = 0
    if shared_x and corr and set(corr) <= {"w_hh"} and steps > 1:
        h_shared = (
            np.tanh(base[0])
            if p.activation is Activation.TANH
            else np.maximum(base[0], 0.0)
        )
        if collect_all:
            np.copyto(outs[0], h_shared)
        t_start = 1

    for t in range(t_start, steps):
        x_t = x_steps[t]
        if t == 0:
            # zero initial state: no hidden product, no w_hh correction
            if shared_x:
                np.copyto(a, base[0])
            else:
                np.matmul(x_t.reshape(lb, x_t.shape[2]), w_xht, out=a.reshape(lb, hsz))
                a += p.b_h
        elif t == 1 and h_shared is not None:
            np.copyto(a, base[1] + h_shared @ w_hht)
            _apply_correction(a, corr.get("w_hh"), h_shared)
        else:
            np.matmul(h.reshape(lb, hsz), w_hht, out=a.reshape(lb, hsz))
            if shared_x:
                a += base[t]
            else:
                np.matmul(
                    x_t.reshape(lb, x_t.shape[2]), w_xht, out=tmp.reshape(lb, hsz)
                )
                a += tmp
                a += p.b_h
            _apply_correction(a, corr.get("w_hh"), h)
        _apply_correction(a, corr.get("w_xh"), x_t)
        _apply_bias_correction(a, corr.get("b_h"))
        h_out = outs[t] if collect_all else outs[0]
        if p.activation is Activation.TANH:
            np.tanh(a, out=h_out)
        else:
            np.maximum(a, 0.0, out=h_out)
        h = h_out
    return outs if collect_all else outs[0]


def _laned_dense(p: DenseParams, x, corr, lanes, batch):
    if x.ndim == 2:
        a = np.broadcast_to(x @ p.w.T, (lanes, batch, p.output_size)).copy()
    else:
        lb = lanes * batch
        a = (x.reshape(lb, x.shape[2]) @ p.w.T).reshape(lanes, batch, p.output_size)
    a += p.b
    corr = corr or {}
    _apply_correction(a, corr.get("w"), x)
    _apply_bias_correction(a, corr.get("b"))
    return p.activation.apply(a)


def _shared_layer_inputs(params, obs):
    """Input of every stack layer under the unperturbed parameters."""
    if params.topology is Topology.ANN:
        inputs = [obs.reshape(obs.shape[0], -1)]
        for layer in params.layers[:-1]:
            inputs.append(dense_forward_cached(layer, inputs[-1]).h)
        return inputs
    inputs = [obs]
    for layer in params.layers[:-1]:
        if isinstance(layer, LstmParams):
            hs = lstm_forward_cached(layer, inputs[-1]).h.swapaxes(0, 1)
        else:
            hs = rnn_forward_cached(layer, inputs[-1]).h.swapaxes(0, 1)
        inputs.append(np.ascontiguousarray(hs))
    return inputs


def _chunk_corrections(blocks, idx, k, eps):
    """Per-block (lanes, rows, cols, signed eps) arrays for one chunk."""
    corr = {}
    for b in blocks:
        size = int(np.prod(b.shape))
        sel = (idx >= b.offset) & (idx < b.offset + size)
        if not sel.any():
            continue
        pos = np.nonzero(sel)[0]
        local = idx[pos] - b.offset
        if len(b.shape) == 2:
            r, c = local // b.shape[1], local % b.shape[1]
        else:
            r, c = local, np.zeros_like(local)
        signed = np.full(pos.shape[0], eps)
        # lane j carries +eps on entry j, lane j+k the matching -eps
        corr[b.kind] = (
            np.concatenate([pos, pos + k]),
            np.concatenate([r, r]),
            np.concatenate([c, c]),
            np.concatenate([signed, -signed]),
        )
    return corr


def _fd_vectorized(params, obs, actions, targets, eps, lane_chunk) -> np.ndarray:
    if lane_chunk < 1:
        raise DataError(f"lane_chunk must be >= 1, got {lane_chunk}")
    batch = obs.shape[0]
    rows = np.arange(batch)
    shared = _shared_layer_inputs(params, obs)
    grad = np.empty(params.size)
    is_ann = params.topology is Topology.ANN
    head_index = len(params.layers) - 1
    ws = _Workspace()

    layer_blocks = {}
    for b in params.blocks:
        layer_blocks.setdefault(b.layer, []).append(b)

    for layer_index, blocks in layer_blocks.items():
        lo = blocks[0].offset
        hi = blocks[-1].offset + int(np.prod(blocks[-1].shape))
        for start in range(lo, hi, lane_chunk):
            idx = np.arange(start, min(start + lane_chunk, hi))
            k = idx.shape[0]
            lanes = 2 * k
            corr = _chunk_corrections(blocks, idx, k, eps)

            if is_ann:
                cur = shared[layer_index]
                for j in range(layer_index, len(params.layers)):
                    cur = _laned_dense(
                        params.layers[j],
                        cur,
                        corr if j == layer_index else None,
                        lanes,
                        batch,
                    )
                q = cur
            elif layer_index == head_index:
                q = _laned_dense(params.layers[-1], shared[-1][:, -1], corr, lanes, batch)
            else:
                x_in = shared[layer_index]
                cur = [np.ascontiguousarray(x_in[:, t]) for t in range(x_in.shape[1])]
                for j in range(layer_index, head_index):
                    layer = params.layers[j]
                    this_corr = corr if j == layer_index else None
                    collect_all = j < head_index - 1
                    if isinstance(layer, LstmParams):
                        cur = _laned_lstm(
                            layer, cur, this_corr, lanes, batch, collect_all, ws, j
                        )
                    else:
                        cur = _laned_rnn(
                            layer, cur, this_corr, lanes, batch, collect_all, ws, j
                        )
                last_h = cur[-1] if isinstance(cur, list) else cur
                q = _laned_dense(params.layers[-1], last_h, None, lanes, batch)

            diff = q[:, rows, actions] - targets  # (lanes, B)
            f = (diff * diff).sum(axis=1) / batch
            grad[idx] = (f[:k] - f[k:]) / (2.0 * eps)
    return grad
