import json

import numpy as np
import numpy.testing as npt
import pytest

from rnnfilter.errors import DatasetFormatError, InvalidModelError
from rnnfilter.networks import (ARCHITECTURES, NetworkConfig, NetworkParams,
                                STEP_FUNCTIONS, bptt_gradients, count_params,
                                forward_sequence, init_params, initial_state,
                                load_checkpoint, param_shapes, save_checkpoint,
                                sequence_loss)

SIGMOID_1 = 0.7310585786300049
TANH_1 = 0.7615941559557649


def _const_params(cfg, value=0.0):
    return NetworkParams(cfg, {name: np.full(shape, float(value))
                               for name, shape in param_shapes(cfg).items()})


def _fd_gradcheck(arch, hidden, T, seed, m=2, n=2, step=1e-5):
    """Worst relative error of BPTT vs a 4th-order central difference.

    The higher-order central stencil at the stated step keeps the oracle's
    own truncation error (~1e-11) well below the 1e-5 acceptance threshold
    even for near-zero gradient entries.
    """
    cfg = NetworkConfig(arch, m=m, n=n, hidden=hidden, seed=seed)
    params = init_params(cfg)
    rng = np.random.default_rng(seed + 999)
    ys = rng.standard_normal((T, m))
    targets = rng.standard_normal((T, n))
    x0 = rng.standard_normal(n)

    def loss_of(p):
        est, _ = forward_sequence(p, ys, initial_state(cfg, x0))
        return sequence_loss(est, targets)

    _, tape = forward_sequence(params, ys, initial_state(cfg, x0))
    _, grads = bptt_gradients(params, tape, targets)
    worst = 0.0
    for name, arr in params.arrays.items():
        flat = arr.ravel()
        gflat = grads[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            samples = []
            for offset in (2.0, 1.0, -1.0, -2.0):
                flat[idx] = orig + offset * step
                samples.append(loss_of(params))
            flat[idx] = orig
            up2, up1, down1, down2 = samples
            fd = (-up2 + 8.0 * up1 - 8.0 * down1 + down2) / (12.0 * step)
            rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-8)
            worst = max(worst, rel)
    return worst


class TestInitParams:
    def test_output_rows_are_orthonormal(self):
        for arch in ARCHITECTURES:
            cfg = NetworkConfig(arch, m=3, n=4, hidden=12, seed=5)
            W = init_params(cfg)["W_xa"]
            npt.assert_allclose(W @ W.T, np.eye(4), rtol=0, atol=1e-10)

    def test_glorot_bound(self):
        cfg = NetworkConfig("elstm", m=10, n=3, hidden=50, seed=2)
        params = init_params(cfg)
        bound = 0.31622776601683794  # sqrt(6 / (10 + 50))
        for gate in ("f", "i", "o", "c"):
            W = params[f"W_{gate}y"]
            assert np.abs(W).max() <= bound
            assert np.abs(W).max() > 0.5 * bound  # actually fills the range

    def test_biases_zero(self):
        params = init_params(NetworkConfig("jlstm", m=2, n=2, hidden=6, seed=0))
        for name in ("b_f", "b_i", "b_o", "b_c", "b_x"):
            npt.assert_array_equal(params[name], 0.0)

    def test_deterministic(self):
        cfg = NetworkConfig("jrn", m=2, n=3, hidden=7, seed=11)
        a, b = init_params(cfg), init_params(cfg)
        for name in a.arrays:
            npt.assert_array_equal(a[name], b[name])

    def test_rejects_unknown_arch(self):
        with pytest.raises(InvalidModelError):
            NetworkConfig("gru", m=1, n=1, hidden=4)


class TestStepFunctions:
    def test_ern_zero_params(self):
        cfg = NetworkConfig("ern", m=3, n=2, hidden=5)
        state, xhat = STEP_FUNCTIONS["ern"](_const_params(cfg), initial_state(cfg),
                                            np.ones(3))
        npt.assert_array_equal(state.a, 0.5)
        npt.assert_array_equal(xhat, 0.0)

    def test_ern_hand_example(self):
        cfg = NetworkConfig("ern", m=1, n=1, hidden=1)
        params = NetworkParams(cfg, {
            "W_ay": np.array([[1.0]]), "W_aa": np.array([[0.0]]),
            "W_xa": np.array([[2.0]]), "b_a": np.zeros(1), "b_x": np.ones(1)})
        _, xhat = STEP_FUNCTIONS["ern"](params, initial_state(cfg), np.zeros(1))
        npt.assert_allclose(xhat, [2.0], rtol=0, atol=1e-15)

    def test_ern_decouples_from_input_when_w_ay_zero(self):
        cfg = NetworkConfig("ern", m=2, n=2, hidden=4, seed=3)
        params = init_params(cfg)
        params.arrays["W_ay"][:] = 0.0
        s0 = initial_state(cfg)
        s0.a = np.linspace(-1, 1, 4)
        _, x1 = STEP_FUNCTIONS["ern"](params, s0, np.array([5.0, -7.0]))
        _, x2 = STEP_FUNCTIONS["ern"](params, s0, np.array([0.1, 0.2]))
        npt.assert_array_equal(x1, x2)

    def test_jrn_zero_params_ignores_carry(self):
        cfg = NetworkConfig("jrn", m=1, n=2, hidden=3)
        state = initial_state(cfg, x0=np.array([4.0, -9.0]))
        _, xhat = STEP_FUNCTIONS["jrn"](_const_params(cfg), state, np.zeros(1))
        npt.assert_array_equal(xhat, 0.0)

    def test_jrn_two_step_hand_rollout(self):
        cfg = NetworkConfig("jrn", m=1, n=1, hidden=1)
        params = NetworkParams(cfg, {
            "W_ay": np.array([[1.0]]), "W_ax": np.array([[1.0]]),
            "W_xa": np.array([[1.0]]), "b_a": np.zeros(1), "b_x": np.zeros(1)})
        state = initial_state(cfg)
        state, x1 = STEP_FUNCTIONS["jrn"](params, state, np.zeros(1))
        npt.assert_allclose(x1, [0.5], rtol=0, atol=1e-15)
        _, x2 = STEP_FUNCTIONS["jrn"](params, state, np.zeros(1))
        npt.assert_allclose(x2, [0.6224593312018546], rtol=0, atol=1e-15)

    def test_elstm_zero_params(self):
        cfg = NetworkConfig("elstm", m=2, n=2, hidden=4)
        state, xhat = STEP_FUNCTIONS["elstm"](_const_params(cfg),
                                              initial_state(cfg), np.ones(2))
        for gate in (state.f, state.i, state.o):
            npt.assert_array_equal(gate, 0.5)
        npt.assert_array_equal(state.c_tilde, 0.0)
        npt.assert_array_equal(state.c, 0.0)
        npt.assert_array_equal(state.a, 0.0)
        npt.assert_array_equal(xhat, 0.0)

    def test_elstm_zero_params_unit_cell(self):
        cfg = NetworkConfig("elstm", m=2, n=2, hidden=4)
        s0 = initial_state(cfg)
        s0.c = np.ones(4)
        state, _ = STEP_FUNCTIONS["elstm"](_const_params(cfg), s0, np.zeros(2))
        npt.assert_allclose(state.c, 0.5, rtol=0, atol=1e-15)
        npt.assert_allclose(state.a, 0.23105857863000487, rtol=0, atol=1e-15)

    def test_elstm_saturated_forget_gate_preserves_cell(self):
        cfg = NetworkConfig("elstm", m=1, n=1, hidden=3)
        params = _const_params(cfg)
        params.arrays["b_f"][:] = 10.0
        s0 = initial_state(cfg)
        s0.c = np.array([0.3, -1.2, 2.0])
        state, _ = STEP_FUNCTIONS["elstm"](params, s0, np.zeros(1))
        npt.assert_allclose(state.c, s0.c, rtol=1e-4, atol=0)

    def test_jlstm_zero_params_ignores_carry(self):
        cfg = NetworkConfig("jlstm", m=1, n=2, hidden=3)
        state = initial_state(cfg, x0=np.array([7.0, -2.0]))
        _, xhat = STEP_FUNCTIONS["jlstm"](_const_params(cfg), state, np.zeros(1))
        npt.assert_array_equal(xhat, 0.0)

    def test_jlstm_ignores_hidden_carry(self):
        # Jordan gates see x̂_prev only; a is recomputed every step
        cfg = NetworkConfig("jlstm", m=2, n=2, hidden=5, seed=8)
        params = init_params(cfg)
        y = np.array([0.4, -0.6])
        s1 = initial_state(cfg, x0=np.array([0.3, 0.1]))
        s2 = initial_state(cfg, x0=np.array([0.3, 0.1]))
        s2.a = np.full(5, 17.0)
        _, x1 = STEP_FUNCTIONS["jlstm"](params, s1, y)
        _, x2 = STEP_FUNCTIONS["jlstm"](params, s2, y)
        npt.assert_array_equal(x1, x2)

    def test_jlstm_all_ones_hand_example(self):
        cfg = NetworkConfig("jlstm", m=1, n=1, hidden=1)
        arrays = {name: np.ones(shape) if name.startswith("W") else np.zeros(shape)
                  for name, shape in param_shapes(cfg).items()}
        params = NetworkParams(cfg, arrays)
        state = initial_state(cfg, x0=np.ones(1))
        state, xhat = STEP_FUNCTIONS["jlstm"](params, state, np.zeros(1))
        npt.assert_allclose(state.f, [SIGMOID_1], rtol=0, atol=1e-15)
        npt.assert_allclose(state.c_tilde, [TANH_1], rtol=0, atol=1e-15)
        npt.assert_allclose(state.c, [0.5567699411459397], rtol=0, atol=1e-15)
        npt.assert_allclose(xhat, [0.36960635293570576], rtol=0, atol=1e-15)

    def test_gate_ranges(self):
        rng = np.random.default_rng(0)
        for arch in ("elstm", "jlstm"):
            cfg = NetworkConfig(arch, m=2, n=2, hidden=6, seed=1)
            params = init_params(cfg)
            for name in params.arrays:
                if name.startswith("W"):
                    params.arrays[name] *= 40.0  # push pre-activations hard
            state = initial_state(cfg, x0=rng.standard_normal(2))
            state.c = rng.standard_normal(6)
            for _ in range(5):
                state, _ = STEP_FUNCTIONS[arch](params, state,
                                                rng.standard_normal(2) * 50)
                for gate in (state.f, state.i, state.o):
                    assert np.all(gate > 0.0) and np.all(gate < 1.0)
                assert np.all(state.c_tilde > -1.0) and np.all(state.c_tilde < 1.0)


class TestForwardSequence:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_single_step_reduction(self, arch):
        cfg = NetworkConfig(arch, m=2, n=3, hidden=4, seed=6)
        params = init_params(cfg)
        y = np.array([[0.3, -0.9]])
        x0 = np.array([0.1, 0.2, -0.4])
        estimates, _ = forward_sequence(params, y, initial_state(cfg, x0))
        _, xhat = STEP_FUNCTIONS[arch](params, initial_state(cfg, x0), y[0])
        npt.assert_array_equal(estimates[0], xhat)

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_output_shape(self, arch):
        cfg = NetworkConfig(arch, m=2, n=3, hidden=4, seed=0)
        estimates, _ = forward_sequence(init_params(cfg), np.zeros((9, 2)))
        assert estimates.shape == (9, 3)

    def test_zero_params_emit_bias(self):
        cfg = NetworkConfig("jlstm", m=1, n=2, hidden=3)
        params = _const_params(cfg)
        params.arrays["b_x"][:] = [0.7, -0.3]
        rng = np.random.default_rng(1)
        estimates, _ = forward_sequence(params, rng.standard_normal((6, 1)))
        npt.assert_allclose(estimates, np.tile([0.7, -0.3], (6, 1)),
                            rtol=0, atol=1e-15)

    @pytest.mark.parametrize("arch", ("ern", "elstm"))
    def test_elman_ignores_x_prev(self, arch):
        cfg = NetworkConfig(arch, m=2, n=2, hidden=4, seed=42)
        params = init_params(cfg)
        ys = np.random.default_rng(3).standard_normal((7, 2))
        a, _ = forward_sequence(params, ys, initial_state(cfg, x0=np.zeros(2)))
        b, _ = forward_sequence(params, ys, initial_state(cfg, x0=np.full(2, 9.0)))
        npt.assert_array_equal(a, b)

    @pytest.mark.parametrize("arch", ("jrn", "jlstm"))
    def test_jordan_ignores_hidden(self, arch):
        cfg = NetworkConfig(arch, m=2, n=2, hidden=4, seed=42)
        params = init_params(cfg)
        ys = np.random.default_rng(3).standard_normal((7, 2))
        s1 = initial_state(cfg)
        s2 = initial_state(cfg)
        s2.a = np.full(4, -3.0)
        a, _ = forward_sequence(params, ys, s1)
        b, _ = forward_sequence(params, ys, s2)
        npt.assert_array_equal(a, b)

    def test_empty_sequence_rejected(self):
        cfg = NetworkConfig("ern", m=1, n=1, hidden=2)
        with pytest.raises(InvalidModelError):
            forward_sequence(init_params(cfg), np.zeros((0, 1)))

    def test_deterministic(self):
        cfg = NetworkConfig("jlstm", m=1, n=2, hidden=5, seed=9)
        params = init_params(cfg)
        ys = np.random.default_rng(2).standard_normal((20, 1))
        a, tape_a = forward_sequence(params, ys)
        b, tape_b = forward_sequence(params, ys)
        npt.assert_array_equal(a, b)
        la, ga = bptt_gradients(params, tape_a, np.zeros((20, 2)))
        lb, gb = bptt_gradients(params, tape_b, np.zeros((20, 2)))
        assert la == lb
        for name in ga:
            npt.assert_array_equal(ga[name], gb[name])


class TestBpttGradients:
    def test_zero_at_minimum(self):
        cfg = NetworkConfig("elstm", m=2, n=2, hidden=3, seed=4)
        params = init_params(cfg)
        ys = np.random.default_rng(0).standard_normal((5, 2))
        estimates, tape = forward_sequence(params, ys)
        loss, grads = bptt_gradients(params, tape, estimates)
        assert loss == 0.0
        for g in grads.values():
            npt.assert_array_equal(g, 0.0)

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    @pytest.mark.parametrize("hidden,T", [(2, 3), (2, 10), (4, 3), (4, 10)])
    def test_matches_finite_differences(self, arch, hidden, T):
        for seed in range(5):
            worst = _fd_gradcheck(arch, hidden, T, seed)
            assert worst < 1e-5, f"{arch} h={hidden} T={T} seed={seed}: {worst}"

    def test_quadratic_homogeneity(self):
        cfg = NetworkConfig("jrn", m=1, n=2, hidden=4, seed=7)
        params = init_params(cfg)
        ys = np.random.default_rng(5).standard_normal((8, 1))
        estimates, tape = forward_sequence(params, ys)
        targets = np.random.default_rng(6).standard_normal((8, 2))
        loss1, grads1 = bptt_gradients(params, tape, targets)
        doubled = estimates + 2.0 * (targets - estimates)
        loss2, grads2 = bptt_gradients(params, tape, doubled)
        npt.assert_allclose(loss2, 4.0 * loss1, rtol=1e-12)
        for name in grads1:
            npt.assert_allclose(grads2[name], 2.0 * grads1[name],
                                rtol=1e-10, atol=1e-14)

    def test_shape_mismatch(self):
        cfg = NetworkConfig("ern", m=1, n=1, hidden=2)
        params = init_params(cfg)
        _, tape = forward_sequence(params, np.zeros((4, 1)))
        with pytest.raises(InvalidModelError):
            bptt_gradients(params, tape, np.zeros((5, 1)))


class TestCountParams:
    def test_jlstm_paper_shape(self):
        assert count_params(NetworkConfig("jlstm", m=1, n=2, hidden=50)) == 902

    def test_elstm_paper_shape(self):
        assert count_params(NetworkConfig("elstm", m=1, n=2, hidden=50)) == 10502

    def test_minimal_ern(self):
        assert count_params(NetworkConfig("ern", m=1, n=1, hidden=1)) == 5

    def test_jordan_smaller_when_outputs_below_hidden(self):
        for m, n, h in ((1, 2, 50), (3, 5, 16), (2, 7, 8)):
            jl = count_params(NetworkConfig("jlstm", m=m, n=n, hidden=h))
            el = count_params(NetworkConfig("elstm", m=m, n=n, hidden=h))
            assert jl < el


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_round_trip_bit_exact(self, arch, tmp_path):
        cfg = NetworkConfig(arch, m=3, n=2, hidden=6, seed=13)
        params = init_params(cfg)
        path = tmp_path / "ckpt.json"
        save_checkpoint(params, path, extra={"train_seconds": 1.5})
        loaded, extra = load_checkpoint(path)
        assert loaded.cfg == cfg
        assert extra["train_seconds"] == 1.5
        for name in params.arrays:
            npt.assert_array_equal(loaded[name], params[name])

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{}")
        with pytest.raises(DatasetFormatError):
            load_checkpoint(path)
        path.write_text("not json at all")
        with pytest.raises(DatasetFormatError):
            load_checkpoint(path)

    def test_wrong_shape_rejected(self, tmp_path):
        cfg = NetworkConfig("ern", m=1, n=1, hidden=2, seed=0)
        params = init_params(cfg)
        path = tmp_path / "ckpt.json"
        save_checkpoint(params, path)
        doc = json.loads(path.read_text())
        doc["params"]["W_ay"]["data"] = [1.0, 2.0, 3.0]
        doc["params"]["W_ay"]["shape"] = [3, 1]
        path.write_text(json.dumps(doc))
        with pytest.raises(DatasetFormatError):
            load_checkpoint(path)
