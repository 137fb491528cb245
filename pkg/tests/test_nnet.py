"""Layer kit: forward oracles, BPTT gradients, TD loss, optimizers, checkpoints."""

import math

import numpy as np
import pytest

from spoilage_rl.domain import DataError
from spoilage_rl.nnet import (
    Activation,
    AdamConfig,
    DenseParams,
    EmptyBatchError,
    InputLayout,
    LstmParams,
    MissingCacheError,
    NonFiniteValueError,
    OptimizerState,
    RnnParams,
    SgdConfig,
    ShapeMismatchError,
    Topology,
    TransitionBatch,
    backward,
    build_qnet,
    dense_forward,
    encode_observations,
    grad_check,
    load_checkpoint,
    lstm_forward,
    optimizer_step,
    qnet_forward,
    qnet_forward_cached,
    rnn_forward,
    save_checkpoint,
    td_loss,
)

TOPOLOGIES = list(Topology)


def scalar_lstm_oracle(p: LstmParams, xs, peephole_previous_cell=False):
    """Plain-python gate recurrence, written independently of the layer code.

    Evaluates every gate entry with explicit loops so any vectorisation or
    fused-storage mistake in the real forward shows up as a mismatch.
    """

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def dot(row, vec):
        return sum(float(a) * float(b) for a, b in zip(row, vec))

    hidden = p.w_hi.shape[0]
    h = [0.0] * hidden
    c = [0.0] * hidden
    hs, cs = [], []
    for x in xs:
        i = [sig(dot(p.w_xi[j], x) + dot(p.w_hi[j], h) + dot(p.w_ci[j], c) + p.b_i[j])
             for j in range(hidden)]
        f = [sig(dot(p.w_xf[j], x) + dot(p.w_hf[j], h) + dot(p.w_cf[j], c) + p.b_f[j])
             for j in range(hidden)]
        g = [math.tanh(dot(p.w_xg[j], x) + dot(p.w_hg[j], h) + dot(p.w_cg[j], c) + p.b_g[j])
             for j in range(hidden)]
        c_new = [f[j] * c[j] + i[j] * g[j] for j in range(hidden)]
        c_gate = c if peephole_previous_cell else c_new
        o = [sig(dot(p.w_xo[j], x) + dot(p.w_ho[j], h) + dot(p.w_co[j], c_gate) + p.b_o[j])
             for j in range(hidden)]
        h = [o[j] * math.tanh(c_new[j]) for j in range(hidden)]
        c = c_new
        hs.append(h)
        cs.append(c)
    return np.array(hs), np.array(cs)


def make_batch(rng, n, seq_len, input_size, n_actions=4):
    return TransitionBatch(
        obs=rng.random((n, seq_len, input_size)),
        actions=rng.integers(0, n_actions, n),
        rewards=rng.normal(size=n),
        next_obs=rng.random((n, seq_len, input_size)),
        done=rng.random(n) < 0.3,
    )


class TestLstmForward:
    def test_zero_parameters_are_a_fixed_point(self):
        p = LstmParams.zeros(2, 3)
        hs, cs = lstm_forward(p, np.random.default_rng(0).random((6, 2)))
        assert np.array_equal(hs, np.zeros((6, 3)))
        assert np.array_equal(cs, np.zeros((6, 3)))

    def test_saturated_output_gate_exposes_cell_tanh(self):
        # sigma(40) rounds to exactly 1.0 in double precision, so the
        # output equation collapses to h_t = tanh(c_t) bit for bit
        p = LstmParams.zeros(1, 1)
        p.b_o[0] = 40.0
        p.b_i[0] = 0.3
        p.b_g[0] = 0.7
        hs, cs = lstm_forward(p, np.zeros((5, 1)))
        assert np.array_equal(hs, np.tanh(cs))
        # the cell follows c <- 0.5c + sigma(0.3) tanh(0.7)
        c, expect = 0.0, []
        for _ in range(5):
            c = 0.5 * c + (1.0 / (1.0 + math.exp(-0.3))) * math.tanh(0.7)
            expect.append(c)
        np.testing.assert_allclose(cs[:, 0], expect, rtol=1e-14)

    @pytest.mark.parametrize("prev_cell", [False, True])
    def test_random_net_matches_scalar_oracle(self, prev_cell):
        rng = np.random.default_rng(42)
        p = LstmParams.zeros(2, 3, peephole_previous_cell=prev_cell)
        for name in ("w_x", "w_h", "w_co", "bias"):
            arr = getattr(p, name)
            arr[...] = rng.normal(scale=0.6, size=arr.shape)
        p.w_c[...] = rng.normal(scale=0.6, size=p.w_c.shape)
        xs = rng.normal(size=(4, 2))
        hs, cs = lstm_forward(p, xs)
        oh, oc = scalar_lstm_oracle(p, xs, peephole_previous_cell=prev_cell)
        np.testing.assert_allclose(hs, oh, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(cs, oc, rtol=1e-12, atol=1e-14)

    def test_explicit_initial_state_enters_recurrence(self):
        p = LstmParams.zeros(1, 1)
        p.b_o[0] = 40.0
        h0, c0 = np.array([0.0]), np.array([2.0])
        hs, cs = lstm_forward(p, np.zeros((1, 1)), initial=(h0, c0))
        # f = i = 0.5, g = 0: c1 = 0.5 * 2.0
        assert cs[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert hs[0, 0] == pytest.approx(math.tanh(1.0), abs=1e-15)

    def test_batched_forward_matches_stacked_singles(self):
        rng = np.random.default_rng(7)
        p = LstmParams.zeros(2, 3)
        p.w_x[...] = rng.normal(size=p.w_x.shape)
        p.w_h[...] = rng.normal(size=p.w_h.shape)
        xs = rng.normal(size=(3, 4, 2))
        hb, cb = lstm_forward(p, xs)
        for b in range(3):
            hs, cs = lstm_forward(p, xs[b])
            np.testing.assert_allclose(hb[b], hs, rtol=1e-13)
            np.testing.assert_allclose(cb[b], cs, rtol=1e-13)

    def test_mismatched_input_width_raises(self):
        p = LstmParams.zeros(2, 3)
        with pytest.raises(ShapeMismatchError):
            lstm_forward(p, np.zeros((4, 5)))


class TestRnnForward:
    def test_zero_parameters_are_a_fixed_point(self):
        p = RnnParams(w_xh=np.zeros((3, 2)), w_hh=np.zeros((3, 3)), b_h=np.zeros(3))
        assert np.array_equal(rnn_forward(p, np.ones((4, 2))), np.zeros((4, 3)))

    def test_scalar_tanh_step(self):
        p = RnnParams(w_xh=np.array([[1.0]]), w_hh=np.array([[0.0]]), b_h=np.zeros(1))
        hs = rnn_forward(p, np.array([[0.5]]))
        assert hs[0, 0] == pytest.approx(0.46211715726000974, abs=1e-15)

    def test_relu_carries_hidden_state(self):
        p = RnnParams(
            w_xh=np.array([[0.0]]),
            w_hh=np.array([[1.0]]),
            b_h=np.zeros(1),
            activation=Activation.RELU,
        )
        hs = rnn_forward(p, np.zeros((2, 1)), h0=np.array([2.0]))
        np.testing.assert_array_equal(hs, [[2.0], [2.0]])

    def test_mismatched_input_width_raises(self):
        p = RnnParams(w_xh=np.zeros((3, 2)), w_hh=np.zeros((3, 3)), b_h=np.zeros(3))
        with pytest.raises(ShapeMismatchError):
            rnn_forward(p, np.zeros((4, 3)))


class TestDenseForward:
    def test_identity_map(self):
        p = DenseParams(w=np.eye(3), b=np.zeros(3), activation=Activation.IDENTITY)
        x = np.array([1.5, -2.0, 0.25])
        assert np.array_equal(dense_forward(p, x), x)

    def test_relu_clamps_negatives(self):
        p = DenseParams(w=np.eye(2), b=np.zeros(2), activation=Activation.RELU)
        np.testing.assert_array_equal(dense_forward(p, np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_hand_product(self):
        p = DenseParams(w=np.array([[1.0, 1.0]]), b=np.array([0.5]),
                        activation=Activation.IDENTITY)
        assert dense_forward(p, np.array([1.0, 2.0]))[0] == pytest.approx(3.5, abs=0)


class TestQnetForward:
    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_zero_network_outputs_zero_q(self, topology):
        p = build_qnet(topology, input_size=2, hidden_size=5, seq_len=3)
        q = qnet_forward(p, np.random.default_rng(1).random((3, 2)))
        assert np.array_equal(q, np.zeros(4))

    def test_hybrid_head_bias_passes_through_zero_recurrence(self):
        p = build_qnet(Topology.HYBRID, input_size=1, hidden_size=4, seq_len=5)
        p.head.b[...] = [0.1, -0.2, 0.3, 0.4]
        q = qnet_forward(p, np.random.default_rng(2).random((5, 1)))
        np.testing.assert_array_equal(q, [0.1, -0.2, 0.3, 0.4])

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_repeated_calls_are_bitwise_identical(self, topology):
        rng = np.random.default_rng(3)
        p = build_qnet(topology, input_size=2, hidden_size=6, seq_len=4, rng=rng)
        x = rng.random((7, 4, 2))
        assert np.array_equal(qnet_forward(p, x), qnet_forward(p, x))

    def test_ann_consumes_flattened_sequence(self):
        rng = np.random.default_rng(4)
        p = build_qnet(Topology.ANN, input_size=2, hidden_size=6, seq_len=4, rng=rng)
        assert p.layers[0].w.shape == (6, 8)
        x = rng.random((4, 2))
        manual = x.reshape(-1)
        for layer in p.layers[:-1]:
            manual = np.maximum(layer.w @ manual + layer.b, 0.0)
        manual = p.head.w @ manual + p.head.b
        np.testing.assert_allclose(qnet_forward(p, x), manual, rtol=1e-13)

    def test_recurrent_head_reads_last_step_only(self):
        rng = np.random.default_rng(5)
        p = build_qnet(Topology.LSTM_ONLY, input_size=1, hidden_size=4, seq_len=3, rng=rng)
        x = rng.random((3, 1))
        hs, _ = lstm_forward(p.layers[0], x)
        np.testing.assert_allclose(
            qnet_forward(p, x), p.head.w @ hs[-1] + p.head.b, rtol=1e-13
        )

    def test_non_finite_parameters_raise(self):
        p = build_qnet(Topology.RNN_ONLY, input_size=2, hidden_size=4, seq_len=3)
        p.theta[0] = np.nan
        with pytest.raises(NonFiniteValueError):
            qnet_forward(p, np.zeros((3, 2)))

    def test_wrong_feature_width_raises(self):
        p = build_qnet(Topology.HYBRID, input_size=2, hidden_size=4, seq_len=3)
        with pytest.raises(ShapeMismatchError):
            qnet_forward(p, np.zeros((3, 5)))

    def test_gate_views_alias_the_flat_parameter_vector(self):
        p = build_qnet(Topology.HYBRID, input_size=1, hidden_size=4, seq_len=5)
        p.theta[0] = 7.0
        assert p.layers[0].w_xi[0, 0] == 7.0
        p.layers[0].w_xi[0, 0] = -3.0
        assert p.theta[0] == -3.0


class TestBackward:
    def test_zero_output_gradient_gives_zero_parameter_gradient(self):
        rng = np.random.default_rng(6)
        p = build_qnet(Topology.HYBRID, input_size=2, hidden_size=5, seq_len=4, rng=rng)
        cache = qnet_forward_cached(p, rng.random((3, 4, 2)))
        grads = backward(p, cache, np.zeros((3, 4)))
        assert np.array_equal(grads, np.zeros(p.size))

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_duplicated_sample_doubles_the_gradient(self, topology):
        rng = np.random.default_rng(8)
        p = build_qnet(topology, input_size=2, hidden_size=5, seq_len=4, rng=rng)
        x = rng.random((1, 4, 2))
        dq = rng.normal(size=(1, 4))
        g1 = backward(p, qnet_forward_cached(p, x), dq)
        x2 = np.concatenate([x, x])
        g2 = backward(p, qnet_forward_cached(p, x2), np.concatenate([dq, dq]))
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-13, atol=1e-15)

    def test_cache_from_other_parameters_is_rejected(self):
        rng = np.random.default_rng(9)
        p1 = build_qnet(Topology.RNN_ONLY, input_size=2, hidden_size=4, seq_len=3, rng=rng)
        p2 = build_qnet(Topology.RNN_ONLY, input_size=2, hidden_size=4, seq_len=3, rng=rng)
        cache = qnet_forward_cached(p1, rng.random((2, 3, 2)))
        with pytest.raises(MissingCacheError):
            backward(p2, cache, np.zeros((2, 4)))


class TestTdLoss:
    def test_single_transition_hand_value(self):
        p = build_qnet(Topology.LSTM_ONLY, input_size=1, hidden_size=4, seq_len=5)
        p.head.b[0] = 0.2
        batch = TransitionBatch(
            obs=np.zeros((1, 5, 1)),
            actions=np.array([0]),
            rewards=np.array([1.0]),
            next_obs=np.zeros((1, 5, 1)),
            done=np.array([False]),
        )
        loss, _ = td_loss(p, batch, gamma=0.0)
        assert loss == pytest.approx(0.64, abs=1e-15)

    def test_zero_residual_means_zero_loss_and_gradients(self):
        p = build_qnet(Topology.HYBRID, input_size=1, hidden_size=4, seq_len=5)
        batch = TransitionBatch(
            obs=np.zeros((3, 5, 1)),
            actions=np.array([0, 1, 2]),
            rewards=np.zeros(3),
            next_obs=np.zeros((3, 5, 1)),
            done=np.array([True, True, True]),
        )
        loss, grads = td_loss(p, batch, gamma=0.9)
        assert loss == 0.0
        assert np.array_equal(grads, np.zeros(p.size))

    def test_done_excludes_bootstrap(self):
        rng = np.random.default_rng(10)
        p = build_qnet(Topology.RNN_ONLY, input_size=1, hidden_size=4, seq_len=5, rng=rng)
        obs = rng.random((1, 5, 1))
        next_obs = rng.random((1, 5, 1))
        kw = dict(obs=obs, actions=np.array([2]), rewards=np.array([1.0]),
                  next_obs=next_obs)
        loss_done, _ = td_loss(p, TransitionBatch(done=np.array([True]), **kw), 0.9)
        q_sa = qnet_forward(p, obs[0])[2]
        assert loss_done == pytest.approx((1.0 - q_sa) ** 2, rel=1e-13)
        loss_live, _ = td_loss(p, TransitionBatch(done=np.array([False]), **kw), 0.9)
        y = 1.0 + 0.9 * qnet_forward(p, next_obs[0]).max()
        assert loss_live == pytest.approx((y - q_sa) ** 2, rel=1e-13)

    def test_gamma_zero_is_mse_against_immediate_rewards(self):
        rng = np.random.default_rng(11)
        p = build_qnet(Topology.HYBRID, input_size=2, hidden_size=5, seq_len=4, rng=rng)
        batch = make_batch(rng, 6, 4, 2)
        loss, _ = td_loss(p, batch, gamma=0.0)
        q = np.array([qnet_forward(p, o)[a] for o, a in zip(batch.obs, batch.actions)])
        assert loss == pytest.approx(np.mean((batch.rewards - q) ** 2), rel=1e-13)

    def test_empty_batch_rejected(self):
        p = build_qnet(Topology.ANN, input_size=2, hidden_size=4, seq_len=3)
        batch = TransitionBatch(
            obs=np.zeros((0, 3, 2)), actions=np.zeros(0, dtype=int),
            rewards=np.zeros(0), next_obs=np.zeros((0, 3, 2)),
            done=np.zeros(0, dtype=bool),
        )
        with pytest.raises(EmptyBatchError):
            td_loss(p, batch, gamma=0.5)

    @pytest.mark.parametrize("gamma", [-0.1, 1.0, 1.5])
    def test_gamma_outside_unit_interval_rejected(self, gamma):
        rng = np.random.default_rng(12)
        p = build_qnet(Topology.ANN, input_size=2, hidden_size=4, seq_len=3, rng=rng)
        with pytest.raises(DataError):
            td_loss(p, make_batch(rng, 2, 3, 2), gamma=gamma)


class TestGradCheck:
    @pytest.mark.parametrize("topology", TOPOLOGIES)
    @pytest.mark.parametrize("method", ["serial", "vectorized"])
    def test_small_nets_pass(self, topology, method):
        rng = np.random.default_rng(13)
        p = build_qnet(topology, input_size=3, hidden_size=6, seq_len=4, rng=rng)
        err = grad_check(p, make_batch(rng, 5, 4, 3), gamma=0.9, method=method)
        assert err < 1e-8

    def test_engines_agree(self):
        rng = np.random.default_rng(14)
        p = build_qnet(Topology.HYBRID, input_size=3, hidden_size=6, seq_len=4, rng=rng)
        batch = make_batch(rng, 5, 4, 3)
        es = grad_check(p, batch, gamma=0.9, method="serial")
        # a tiny lane chunk forces many chunk boundaries through the engine
        ev = grad_check(p, batch, gamma=0.9, method="vectorized", lane_chunk=7)
        assert abs(es - ev) < 1e-9

    def test_peephole_variant_passes(self):
        rng = np.random.default_rng(15)
        p = build_qnet(Topology.LSTM_ONLY, input_size=3, hidden_size=6, seq_len=4,
                       rng=rng, peephole_previous_cell=True)
        assert grad_check(p, make_batch(rng, 5, 4, 3), gamma=0.9) < 1e-8

    def test_zero_network_and_zero_input_report_zero_error(self):
        p = build_qnet(Topology.HYBRID, input_size=2, hidden_size=4, seq_len=3)
        batch = TransitionBatch(
            obs=np.zeros((2, 3, 2)), actions=np.array([0, 1]),
            rewards=np.zeros(2), next_obs=np.zeros((2, 3, 2)),
            done=np.array([False, False]),
        )
        assert grad_check(p, batch, gamma=0.5, method="serial") == 0.0
        assert grad_check(p, batch, gamma=0.5, method="vectorized") == 0.0

    def test_corrupted_gradient_is_flagged(self):
        rng = np.random.default_rng(16)
        p = build_qnet(Topology.RNN_ONLY, input_size=2, hidden_size=4, seq_len=3, rng=rng)
        batch = make_batch(rng, 4, 3, 2)
        _, grads = td_loss(p, batch, gamma=0.9)
        clean = grad_check(p, batch, gamma=0.9, analytic=grads)
        corrupted = grads.copy()
        corrupted[p.size // 2] += 0.1
        assert grad_check(p, batch, gamma=0.9, analytic=corrupted) > 1e-2
        assert clean < 1e-8

    @pytest.mark.parametrize("eps", [1e-7, 1e-3, 0.0])
    def test_fd_epsilon_bounds(self, eps):
        rng = np.random.default_rng(17)
        p = build_qnet(Topology.ANN, input_size=2, hidden_size=4, seq_len=3, rng=rng)
        with pytest.raises(DataError):
            grad_check(p, make_batch(rng, 2, 3, 2), fd_epsilon=eps)


class TestOptimizer:
    def test_sgd_hand_update(self):
        theta = np.array([1.0])
        optimizer_step(theta, np.array([2.0]), OptimizerState(), SgdConfig(learning_rate=0.1))
        assert theta[0] == pytest.approx(0.8, abs=1e-16)

    def test_zero_gradient_changes_nothing(self):
        for config in (SgdConfig(), AdamConfig()):
            theta = np.array([0.5, -0.25])
            state = OptimizerState()
            for _ in range(3):
                optimizer_step(theta, np.zeros(2), state, config)
            np.testing.assert_array_equal(theta, [0.5, -0.25])

    def test_adam_step_magnitude_approaches_learning_rate(self):
        config = AdamConfig(learning_rate=1e-3)
        theta = np.array([0.0])
        state = OptimizerState()
        deltas = []
        for _ in range(400):
            before = theta[0]
            optimizer_step(theta, np.array([0.5]), state, config)
            deltas.append(abs(theta[0] - before))
        assert all(d <= config.learning_rate + 1e-12 for d in deltas)
        assert deltas[-1] == pytest.approx(config.learning_rate, rel=1e-6)
        assert state.step == 400

    def test_adam_descends_against_gradient_sign(self):
        config = AdamConfig(learning_rate=0.01)
        theta = np.array([1.0, -1.0])
        state = OptimizerState()
        for _ in range(50):
            optimizer_step(theta, np.array([1.0, -1.0]), state, config)
        assert theta[0] < 1.0 and theta[1] > -1.0

    def test_network_parameters_update_in_place(self):
        rng = np.random.default_rng(18)
        p = build_qnet(Topology.ANN, input_size=2, hidden_size=4, seq_len=3, rng=rng)
        before = p.theta.copy()
        grads = np.ones(p.size)
        optimizer_step(p, grads, OptimizerState(), SgdConfig(learning_rate=0.01))
        np.testing.assert_allclose(p.theta, before - 0.01, rtol=0, atol=1e-16)

    def test_mismatched_gradient_length_rejected(self):
        theta = np.zeros(3)
        with pytest.raises(ShapeMismatchError):
            optimizer_step(theta, np.zeros(4), OptimizerState(), SgdConfig())

    def test_invalid_hyperparameters_rejected(self):
        with pytest.raises(DataError):
            SgdConfig(learning_rate=-1.0)
        with pytest.raises(DataError):
            AdamConfig(beta2=1.0)


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(19)
        p = build_qnet(Topology.HYBRID, input_size=5, hidden_size=8, seq_len=5,
                       rng=rng, peephole_previous_cell=True,
                       rnn_activation=Activation.RELU)
        path = tmp_path / "model.npz"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        assert q.topology is p.topology
        assert (q.input_size, q.hidden_size, q.seq_len, q.n_actions) == (5, 8, 5, 4)
        assert q.peephole_previous_cell is True
        assert q.rnn_activation is Activation.RELU
        assert np.array_equal(q.theta, p.theta)

    def test_loaded_network_reproduces_outputs(self, tmp_path):
        rng = np.random.default_rng(20)
        p = build_qnet(Topology.LSTM_ONLY, input_size=2, hidden_size=6, seq_len=4, rng=rng)
        path = tmp_path / "model.npz"
        save_checkpoint(p, path)
        x = rng.random((4, 2))
        assert np.array_equal(qnet_forward(p, x), qnet_forward(load_checkpoint(path), x))

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.npz")


class TestEncodeObservations:
    def test_scalar_sequence_layout(self):
        obs = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        enc = encode_observations(obs, InputLayout.SCALAR_SEQUENCE)
        assert enc.shape == (2, 3, 1)
        np.testing.assert_array_equal(enc[1, :, 0], [4.0, 5.0, 6.0])

    def test_window_layout_clamps_leading_rows(self):
        obs = np.array([[0.0], [1.0], [2.0]])
        enc = encode_observations(obs, InputLayout.WINDOW, window=2)
        assert enc.shape == (3, 2, 1)
        np.testing.assert_array_equal(enc[:, :, 0], [[0, 0], [0, 1], [1, 2]])
