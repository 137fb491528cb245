"""Recurrent and dense layer kernels with exact backward passes.

Weight conventions: every weight matrix is (output units, input units) and
activations are row vectors, so a layer computes act(x @ W.T + b). Batched
sequences are (batch, time, features); the per-layer caches stack timesteps
as (time, batch, features) because backward walks time in reverse.

The LSTM is the peephole variant with gate order i, f, g, o:

    i_t = sigmoid(W_xi x_t + W_hi h_{t-1} + W_ci c_{t-1} + b_i)
    f_t = sigmoid(W_xf x_t + W_hf h_{t-1} + W_cf c_{t-1} + b_f)
    g_t = tanh   (W_xg x_t + W_hg h_{t-1} + W_cg c_{t-1} + b_g)
    c_t = f_t * c_{t-1} + i_t * g_t
    o_t = sigmoid(W_xo x_t + W_ho h_{t-1} + W_co c_peep + b_o)
    h_t = o_t * tanh(c_t)

where c_peep is c_t normally and c_{t-1} when `peephole_previous_cell` is
set. Note the cell-input path g_t also carries a peephole term (W_cg); the
peephole matrices are full hidden x hidden, not diagonal.

Storage is fused: w_x stacks the four x-projections as (4H, I) in gate
order, w_h likewise (4H, H), w_c the three c_{t-1} projections (3H, H),
w_co separate (H, H), bias (4H,). Per-gate names (w_xi, w_hf, b_o, ...)
are views into the fused blocks, so either spelling reads and writes the
same memory.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..domain import SpoilageError


class ShapeMismatchError(SpoilageError):
    """An array argument has dimensions the operation cannot accept."""


class Activation(enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"

    def apply(self, a: np.ndarray) -> np.ndarray:
        if self is Activation.IDENTITY:
            return a
        if self is Activation.RELU:
            return np.maximum(a, 0.0)
        return np.tanh(a)

    def grad_from_output(self, h: np.ndarray) -> np.ndarray:
        """d act / d preactivation, expressed through the activation value."""
        if self is Activation.IDENTITY:
            return np.ones_like(h)
        if self is Activation.RELU:
            return (h > 0.0).astype(h.dtype)
        return 1.0 - h * h


def _sigmoid_into(a: np.ndarray, out: np.ndarray) -> np.ndarray:
    # 1/(1+exp(-a)) is tail-safe in ieee754: the far-negative side overflows
    # exp to inf and the quotient rounds to the correct limit 0, so only the
    # overflow warning needs suppressing
    np.negative(a, out=out)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return _sigmoid_into(a, np.empty_like(a))


def _sigmoid_inplace(a: np.ndarray) -> None:
    # same chain as _sigmoid_into but destructive and without the errstate
    # guard; hot loops hoist a single errstate around many calls
    np.negative(a, out=a)
    np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)


def _as_batched(xs: np.ndarray, feature_dims: int) -> tuple[np.ndarray, bool]:
    """Lift a single sample to a batch of one; report whether we did."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == feature_dims:
        return xs[None], True
    if xs.ndim == feature_dims + 1:
        return xs, False
    raise ShapeMismatchError(
        f"expected a {feature_dims}-d sample or a batch of them, got shape {xs.shape}"
    )


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    w_x: np.ndarray  # (4H, I)  gate order i, f, g, o
    w_h: np.ndarray  # (4H, H)
    w_c: np.ndarray  # (3H, H)  peepholes for i, f, g
    w_co: np.ndarray  # (H, H)  output-gate peephole
    bias: np.ndarray  # (4H,)
    peephole_previous_cell: bool = False

    def __post_init__(self):
        h = self.hidden_size
        i = self.input_size
        shapes = {
            "w_x": (4 * h, i),
            "w_h": (4 * h, h),
            "w_c": (3 * h, h),
            "w_co": (h, h),
            "bias": (4 * h,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ShapeMismatchError(f"lstm {name}: expected {want}, got {got}")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    # per-gate views into the fused storage
    def _gate(self, fused, index):
        h = self.hidden_size
        return fused[index * h : (index + 1) * h]

    @property
    def w_xi(self):
        return self._gate(self.w_x, 0)

    @property
    def w_xf(self):
        return self._gate(self.w_x, 1)

    @property
    def w_xg(self):
        return self._gate(self.w_x, 2)

    @property
    def w_xo(self):
        return self._gate(self.w_x, 3)

    @property
    def w_hi(self):
        return self._gate(self.w_h, 0)

    @property
    def w_hf(self):
        return self._gate(self.w_h, 1)

    @property
    def w_hg(self):
        return self._gate(self.w_h, 2)

    @property
    def w_ho(self):
        return self._gate(self.w_h, 3)

    @property
    def w_ci(self):
        return self._gate(self.w_c, 0)

    @property
    def w_cf(self):
        return self._gate(self.w_c, 1)

    @property
    def w_cg(self):
        return self._gate(self.w_c, 2)

    @property
    def b_i(self):
        return self._gate(self.bias, 0)

    @property
    def b_f(self):
        return self._gate(self.bias, 1)

    @property
    def b_g(self):
        return self._gate(self.bias, 2)

    @property
    def b_o(self):
        return self._gate(self.bias, 3)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, peephole_previous_cell: bool = False):
        h = hidden_size
        return cls(
            w_x=np.zeros((4 * h, input_size)),
            w_h=np.zeros((4 * h, h)),
            w_c=np.zeros((3 * h, h)),
            w_co=np.zeros((h, h)),
            bias=np.zeros(4 * h),
            peephole_previous_cell=peephole_previous_cell,
        )


@dataclass
class LstmCache:
    """Stacked per-timestep tensors from a forward pass, (T, B, .) each.

    gates packs the post-activation i|f|g|o blocks side by side so the
    forward pass can activate pre-activations in place; h_all and c_all
    carry a leading zero row so step t's previous state is simply row t.
    The named views below present the layout the backward pass reads.
    """

    x: np.ndarray  # (T, B, I)
    gates: np.ndarray  # (T, B, 4H), post-activation
    c_all: np.ndarray  # (T+1, B, H)
    tanh_c: np.ndarray  # (T, B, H)
    h_all: np.ndarray  # (T+1, B, H)

    @property
    def hidden_size(self) -> int:
        return self.c_all.shape[2]

    @property
    def i(self):
        return self.gates[:, :, : self.hidden_size]

    @property
    def f(self):
        return self.gates[:, :, self.hidden_size : 2 * self.hidden_size]

    @property
    def g(self):
        return self.gates[:, :, 2 * self.hidden_size : 3 * self.hidden_size]

    @property
    def o(self):
        return self.gates[:, :, 3 * self.hidden_size :]

    @property
    def c(self):
        return self.c_all[1:]

    @property
    def c_prev(self):
        return self.c_all[:-1]

    @property
    def h(self):
        return self.h_all[1:]

    @property
    def h_prev(self):
        return self.h_all[:-1]


def lstm_forward_cached(params: LstmParams, xs: np.ndarray) -> LstmCache:
    """Run the recurrence over a (B, T, I) batch keeping everything backward needs."""
    if xs.ndim != 3 or xs.shape[2] != params.input_size:
        raise ShapeMismatchError(
            f"lstm input: expected (batch, time, {params.input_size}), got {xs.shape}"
        )
    b, t, _ = xs.shape
    hsz = params.hidden_size
    dt = params.w_x.dtype  # scratch and cache follow the parameter precision
    cache = LstmCache(
        x=np.ascontiguousarray(xs.swapaxes(0, 1), dtype=dt),
        gates=np.empty((t, b, 4 * hsz), dtype=dt),
        c_all=np.empty((t + 1, b, hsz), dtype=dt),
        tanh_c=np.empty((t, b, hsz), dtype=dt),
        h_all=np.empty((t + 1, b, hsz), dtype=dt),
    )
    cache.h_all[0] = 0.0
    cache.c_all[0] = 0.0
    w_ht = params.w_h.T
    w_ct = params.w_c.T
    w_cot = params.w_co.T

    # input projections for every step in one pass, written straight into
    # the gates buffer and activated in place step by step
    gates = cache.gates
    flat = gates.reshape(t * b, 4 * hsz)
    if params.input_size == 1:
        # width-1 inputs make the projection an outer product; broadcasting
        # beats a degenerate K=1 GEMM here
        np.multiply(cache.x.reshape(t * b, 1), params.w_x.T, out=flat)
    else:
        np.matmul(cache.x.reshape(t * b, -1), params.w_x.T, out=flat)
    flat += params.bias

    rec = np.empty((b, 4 * hsz), dtype=dt)
    tmp = np.empty((b, hsz), dtype=dt)
    with np.errstate(over="ignore"):
        for step in range(t):
            a = gates[step]
            c = cache.c_all[step]
            if step:
                np.matmul(cache.h_all[step], w_ht, out=rec)
                a += rec
                np.matmul(c, w_ct, out=rec[:, : 3 * hsz])
                a[:, : 3 * hsz] += rec[:, : 3 * hsz]
                _sigmoid_inplace(a[:, : 2 * hsz])  # i and f in one pass
            else:
                # zero initial state: the recurrent terms vanish and the
                # forget gate multiplies a zero cell, so its stored value
                # only has to be finite for the backward pass
                _sigmoid_inplace(a[:, :hsz])
                a[:, hsz : 2 * hsz] = 0.5
            g_slice = a[:, 2 * hsz : 3 * hsz]
            np.tanh(g_slice, out=g_slice)
            c_new = cache.c_all[step + 1]
            np.multiply(a[:, :hsz], g_slice, out=c_new)
            if step:
                np.multiply(a[:, hsz : 2 * hsz], c, out=tmp)
                c_new += tmp
            ao = a[:, 3 * hsz :]
            c_peep = c if params.peephole_previous_cell else c_new
            if step or not params.peephole_previous_cell:
                np.matmul(c_peep, w_cot, out=tmp)
                ao += tmp
            _sigmoid_inplace(ao)
            tanh_c = np.tanh(c_new, out=cache.tanh_c[step])
            np.multiply(ao, tanh_c, out=cache.h_all[step + 1])
    return cache


def lstm_forward(params: LstmParams, xs, initial=None):
    """Hidden and cell sequences for one input sequence (or a batch of them).

    `initial` is an optional (h0, c0) pair, zeros by default. Returns
    (hidden_sequence, cell_sequence) shaped like the input's leading dims.
    """
    batched, squeezed = _as_batched(xs, 2)
    if initial is not None:
        # nonzero starts only pass through the uncached path
        h0, c0 = initial
        return _lstm_forward_explicit(params, batched, h0, c0, squeezed)
    cache = lstm_forward_cached(params, batched)
    hs = cache.h.swapaxes(0, 1)
    cs = cache.c.swapaxes(0, 1)
    if squeezed:
        return hs[0], cs[0]
    return hs, cs


def _lstm_forward_explicit(params, xs, h0, c0, squeezed):
    b, t, _ = xs.shape
    hsz = params.hidden_size
    h = np.broadcast_to(np.asarray(h0, dtype=np.float64), (b, hsz)).copy()
    c = np.broadcast_to(np.asarray(c0, dtype=np.float64), (b, hsz)).copy()
    hs = np.empty((b, t, hsz))
    cs = np.empty((b, t, hsz))
    for step in range(t):
        x_t = xs[:, step]
        a = x_t @ params.w_x.T + h @ params.w_h.T + params.bias
        a[:, : 3 * hsz] += c @ params.w_c.T
        i_t = _sigmoid(a[:, 0:hsz])
        f_t = _sigmoid(a[:, hsz : 2 * hsz])
        g_t = np.tanh(a[:, 2 * hsz : 3 * hsz])
        c_new = f_t * c + i_t * g_t
        c_peep = c if params.peephole_previous_cell else c_new
        o_t = _sigmoid(a[:, 3 * hsz :] + c_peep @ params.w_co.T)
        h = o_t * np.tanh(c_new)
        c = c_new
        hs[:, step] = h
        cs[:, step] = c
    if squeezed:
        return hs[0], cs[0]
    return hs, cs


def lstm_backward(
    params: LstmParams,
    cache: LstmCache,
    dh_seq: np.ndarray,
    out: dict,
    need_dx: bool = True,
    dx_time_major: bool = False,
):
    """Backpropagate through time given per-timestep gradients on h.

    dh_seq is (T, B, H). Parameter gradients are ADDED into out["w_x"],
    out["w_h"], out["w_c"], out["w_co"], out["bias"] (sum reduction over the
    batch); returns the gradient w.r.t. the input sequence as (B, T, I), or
    (T, B, I) when dx_time_major is set, or None when need_dx is false (for
    a first layer whose input is data).
    """
    t, b, hsz = cache.h.shape
    if dh_seq.shape != (t, b, hsz):
        raise ShapeMismatchError(
            f"dh sequence: expected {(t, b, hsz)}, got {dh_seq.shape}"
        )
    dt = params.w_x.dtype
    dh = np.empty((b, hsz), dtype=dt)
    dc = np.empty((b, hsz), dtype=dt)
    dh_carry = np.empty((b, hsz), dtype=dt)
    dc_carry = np.empty((b, hsz), dtype=dt)
    t1 = np.empty((b, hsz), dtype=dt)
    # da for every step is kept so the weight gradients reduce to one
    # product per parameter block after the recurrence finishes
    da_all = np.empty((t, b, 4 * hsz), dtype=dt)
    for step in range(t - 1, -1, -1):
        da = da_all[step]
        if step == t - 1:
            dh[:] = dh_seq[step]  # carries start at zero
        else:
            np.add(dh_seq[step], dh_carry, out=dh)
        o = cache.o[step]
        tanh_c = cache.tanh_c[step]
        da_o = da[:, 3 * hsz :]
        np.multiply(dh, tanh_c, out=da_o)
        np.subtract(1.0, o, out=t1)
        t1 *= o
        da_o *= t1
        np.multiply(tanh_c, tanh_c, out=t1)
        np.subtract(1.0, t1, out=t1)
        t1 *= o
        t1 *= dh
        if step == t - 1:
            dc[:] = t1
        else:
            np.add(t1, dc_carry, out=dc)
        if not params.peephole_previous_cell:
            np.matmul(da_o, params.w_co, out=t1)  # a_o reads c_t
            dc += t1
        i_t = cache.i[step]
        f_t = cache.f[step]
        g_t = cache.g[step]
        di = da[:, 0:hsz]
        np.subtract(1.0, i_t, out=di)
        di *= i_t
        di *= g_t
        di *= dc
        df = da[:, hsz : 2 * hsz]
        np.subtract(1.0, f_t, out=df)
        df *= f_t
        df *= cache.c_prev[step]
        df *= dc
        dg = da[:, 2 * hsz : 3 * hsz]
        np.multiply(g_t, g_t, out=dg)
        np.subtract(1.0, dg, out=dg)
        dg *= i_t
        dg *= dc
        if step:  # step 0's carries have nowhere to go
            np.matmul(da, params.w_h, out=dh_carry)
            np.multiply(dc, f_t, out=dc_carry)
            np.matmul(da[:, : 3 * hsz], params.w_c, out=t1)
            dc_carry += t1
            if params.peephole_previous_cell:
                np.matmul(da_o, params.w_co, out=t1)
                dc_carry += t1
    flat = da_all.reshape(t * b, 4 * hsz)
    out["w_x"] += flat.T @ cache.x.reshape(t * b, -1)
    out["w_h"] += flat.T @ cache.h_prev.reshape(t * b, hsz)
    out["w_c"] += flat[:, : 3 * hsz].T @ cache.c_prev.reshape(t * b, hsz)
    c_peep = cache.c_prev if params.peephole_previous_cell else cache.c
    out["w_co"] += flat[:, 3 * hsz :].T @ c_peep.reshape(t * b, hsz)
    out["bias"] += flat.sum(axis=0)
    if not need_dx:
        return None
    dx = (flat @ params.w_x).reshape(t, b, -1)
    return dx if dx_time_major else dx.swapaxes(0, 1)


# ---------------------------------------------------------------------------
# simple RNN


@dataclass
class RnnParams:
    w_xh: np.ndarray  # (H, I)
    w_hh: np.ndarray  # (H, H)
    b_h: np.ndarray  # (H,)
    activation: Activation = Activation.TANH

    def __post_init__(self):
        h, i = self.w_xh.shape
        if self.w_hh.shape != (h, h):
            raise ShapeMismatchError(
                f"rnn w_hh: expected {(h, h)}, got {self.w_hh.shape}"
            )
        if self.b_h.shape != (h,):
            raise ShapeMismatchError(f"rnn b_h: expected ({h},), got {self.b_h.shape}")
        if self.activation is Activation.IDENTITY:
            raise ShapeMismatchError("rnn activation must be tanh or relu")

    @property
    def hidden_size(self) -> int:
        return self.w_xh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_xh.shape[1]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, activation=Activation.TANH):
        return cls(
            w_xh=np.zeros((hidden_size, input_size)),
            w_hh=np.zeros((hidden_size, hidden_size)),
            b_h=np.zeros(hidden_size),
            activation=activation,
        )


@dataclass
class RnnCache:
    """h_all carries a leading zero row; row t is step t's previous state."""

    x: np.ndarray  # (T, B, I)
    h_all: np.ndarray  # (T+1, B, H)

    @property
    def h(self):
        return self.h_all[1:]

    @property
    def h_prev(self):
        return self.h_all[:-1]


def rnn_forward_cached(
    params: RnnParams, xs: np.ndarray, time_major: bool = False
) -> RnnCache:
    """Like rnn_forward but keeps what backward needs; xs is (B, T, I), or
    already (T, B, I) when time_major is set (saves a transpose copy when
    chained after another recurrent layer)."""
    if xs.ndim != 3 or xs.shape[2] != params.input_size:
        raise ShapeMismatchError(
            f"rnn input: expected (batch, time, {params.input_size}), got {xs.shape}"
        )
    dt = params.w_xh.dtype
    if time_major:
        t, b, _ = xs.shape
        x = np.ascontiguousarray(xs, dtype=dt)
    else:
        b, t, _ = xs.shape
        x = np.ascontiguousarray(xs.swapaxes(0, 1), dtype=dt)
    hsz = params.hidden_size
    cache = RnnCache(x=x, h_all=np.empty((t + 1, b, hsz), dtype=dt))
    cache.h_all[0] = 0.0
    # input projections land directly in the output rows, which are then
    # accumulated and activated in place
    flat = cache.h_all[1:].reshape(t * b, hsz)
    if params.input_size == 1:
        np.multiply(x.reshape(t * b, 1), params.w_xh.T, out=flat)
    else:
        np.matmul(x.reshape(t * b, -1), params.w_xh.T, out=flat)
    flat += params.b_h
    w_hht = params.w_hh.T
    rec = np.empty((b, hsz), dtype=dt)
    for step in range(t):
        a = cache.h_all[step + 1]
        if step:
            np.matmul(cache.h_all[step], w_hht, out=rec)
            a += rec
        if params.activation is Activation.TANH:
            np.tanh(a, out=a)
        else:
            np.maximum(a, 0.0, out=a)
    return cache


def rnn_forward(params: RnnParams, xs, h0=None):
    """Hidden sequence h_t = act(W_xh x_t + W_hh h_{t-1} + b)."""
    batched, squeezed = _as_batched(xs, 2)
    if batched.shape[2] != params.input_size:
        raise ShapeMismatchError(
            f"rnn input: expected width {params.input_size}, got {batched.shape[2]}"
        )
    b, t, _ = batched.shape
    hsz = params.hidden_size
    if h0 is None:
        h = np.zeros((b, hsz))
    else:
        h = np.broadcast_to(np.asarray(h0, dtype=np.float64), (b, hsz)).copy()
    hs = np.empty((b, t, hsz))
    for step in range(t):
        a = batched[:, step] @ params.w_xh.T + h @ params.w_hh.T + params.b_h
        h = params.activation.apply(a)
        hs[:, step] = h
    return hs[0] if squeezed else hs


def rnn_backward(
    params: RnnParams,
    cache: RnnCache,
    dh_seq: np.ndarray,
    out: dict,
    need_dx: bool = True,
    dx_time_major: bool = False,
):
    """BPTT companion of rnn_forward_cached; same conventions as lstm_backward."""
    t, b, hsz = cache.h.shape
    if dh_seq.shape != (t, b, hsz):
        raise ShapeMismatchError(
            f"dh sequence: expected {(t, b, hsz)}, got {dh_seq.shape}"
        )
    dt = params.w_xh.dtype
    dh_carry = np.empty((b, hsz), dtype=dt)
    dtotal = np.empty((b, hsz), dtype=dt)
    da_all = np.empty((t, b, hsz), dtype=dt)
    for step in range(t - 1, -1, -1):
        da = da_all[step]
        if step == t - 1:
            dh = dh_seq[step]  # carry starts at zero
        else:
            np.add(dh_seq[step], dh_carry, out=dtotal)
            dh = dtotal
        h = cache.h[step]
        if params.activation is Activation.TANH:
            np.multiply(h, h, out=da)
            np.subtract(1.0, da, out=da)
        else:
            np.heaviside(h, 0.0, out=da)  # relu gate: 1 where h > 0
        da *= dh
        if step:
            np.matmul(da, params.w_hh, out=dh_carry)
    flat = da_all.reshape(t * b, hsz)
    out["w_xh"] += flat.T @ cache.x.reshape(t * b, -1)
    out["w_hh"] += flat.T @ cache.h_prev.reshape(t * b, hsz)
    out["b_h"] += flat.sum(axis=0)
    if not need_dx:
        return None
    dx = (flat @ params.w_xh).reshape(t, b, -1)
    return dx if dx_time_major else dx.swapaxes(0, 1)


# ---------------------------------------------------------------------------
# dense


@dataclass
class DenseParams:
    w: np.ndarray  # (O, I)
    b: np.ndarray  # (O,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        if self.b.shape != (self.w.shape[0],):
            raise ShapeMismatchError(
                f"dense bias: expected ({self.w.shape[0]},), got {self.b.shape}"
            )

    @property
    def output_size(self) -> int:
        return self.w.shape[0]

    @property
    def input_size(self) -> int:
        return self.w.shape[1]

    @classmethod
    def zeros(cls, input_size: int, output_size: int, activation=Activation.IDENTITY):
        return cls(
            w=np.zeros((output_size, input_size)),
            b=np.zeros(output_size),
            activation=activation,
        )


@dataclass
class DenseCache:
    x: np.ndarray  # (B, I)
    h: np.ndarray  # (B, O)


def dense_forward(params: DenseParams, x):
    """act(x @ W.T + b) for a single vector or a (B, I) batch."""
    batched, squeezed = _as_batched(x, 1)
    if batched.shape[1] != params.input_size:
        raise ShapeMismatchError(
            f"dense input: expected width {params.input_size}, got {batched.shape[1]}"
        )
    out = params.activation.apply(batched @ params.w.T + params.b)
    return out[0] if squeezed else out


def dense_forward_cached(params: DenseParams, x: np.ndarray) -> DenseCache:
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeMismatchError(
            f"dense input: expected (batch, {params.input_size}), got {x.shape}"
        )
    return DenseCache(x=x, h=params.activation.apply(x @ params.w.T + params.b))


def dense_backward(
    params: DenseParams, cache: DenseCache, dh: np.ndarray, out: dict
) -> np.ndarray:
    da = dh * params.activation.grad_from_output(cache.h)
    out["w"] += da.T @ cache.x
    out["b"] += da.sum(axis=0)
    return da @ params.w
