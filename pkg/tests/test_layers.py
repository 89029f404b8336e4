"""Layer contracts: LSTM recurrence, BiLSTM symmetry, conv+BN modes, attention, embedding."""

import numpy as np
import pytest

from muteasr import autodiff as ad
from muteasr import layers
from muteasr.autodiff import Tensor
from muteasr.errors import ContractError, DimensionError

from gradcheck import check_gradients


def zero_cell(input_size, hidden):
    return layers.LstmCellParams(
        Tensor.param(np.zeros((4 * hidden, input_size))),
        Tensor.param(np.zeros((4 * hidden, hidden))),
        Tensor.param(np.zeros(4 * hidden)),
    )


class TestLstmCell:
    def test_zero_params_zero_state(self):
        cell = zero_cell(3, 4)
        h, c = layers.lstm_cell_step(cell, Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(h.data, np.zeros(4))
        np.testing.assert_array_equal(c.data, np.zeros(4))

    def test_zero_params_arbitrary_cell_state(self):
        # All gates sit at sigmoid(0) = 0.5, so c' = 0.5 c and h' = 0.5 tanh(0.5 c).
        cell = zero_cell(3, 4)
        c0 = np.array([0.4, -1.0, 2.0, 0.0])
        h, c = layers.lstm_cell_step(cell, Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(c0))
        np.testing.assert_allclose(c.data, 0.5 * c0, atol=1e-15)
        np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), atol=1e-15)

    def test_shape_mismatch(self):
        cell = zero_cell(3, 4)
        with pytest.raises((DimensionError, ContractError)):
            layers.lstm_cell_step(cell, Tensor(np.ones(5)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        cell = layers.LstmCellParams.init(rng, 3, 4)
        x = Tensor.param(rng.uniform(-1, 1, size=3))
        h0 = Tensor(rng.uniform(-1, 1, size=4))
        c0 = Tensor(rng.uniform(-1, 1, size=4))

        def forward():
            h, c = layers.lstm_cell_step(cell, x, h0, c0)
            return ad.sum_all(ad.add(h, c))

        check_gradients(forward, [cell.w_x, cell.w_h, cell.bias, x], atol=1e-6, rtol=1e-5)


class TestBiLstm:
    def test_single_frame_is_concat_of_independent_cells(self):
        rng = np.random.default_rng(1)
        fwd = layers.LstmCellParams.init(rng, 3, 4)
        bwd = layers.LstmCellParams.init(rng, 3, 4)
        x = Tensor(rng.normal(size=(1, 3)))
        out = layers.run_bilstm([(fwd, bwd)], x)
        assert out.shape == (1, 8)
        hf, _ = layers.lstm_cell_step(
            fwd, ad.reshape(x, (3,)), Tensor(np.zeros(4)), Tensor(np.zeros(4))
        )
        hb, _ = layers.lstm_cell_step(
            bwd, ad.reshape(x, (3,)), Tensor(np.zeros(4)), Tensor(np.zeros(4))
        )
        np.testing.assert_array_equal(out.data[0, :4], hf.data)
        np.testing.assert_array_equal(out.data[0, 4:], hb.data)

    def test_reversal_symmetry(self):
        # Reversing the input and swapping direction weights swaps the halves.
        rng = np.random.default_rng(2)
        fwd = layers.LstmCellParams.init(rng, 3, 4)
        bwd = layers.LstmCellParams.init(rng, 3, 4)
        x = rng.normal(size=(5, 3))
        out = layers.run_bilstm([(fwd, bwd)], Tensor(x))
        out_rev = layers.run_bilstm([(bwd, fwd)], Tensor(x[::-1].copy()))
        np.testing.assert_allclose(out.data[:, :4], out_rev.data[::-1, 4:], atol=1e-14)
        np.testing.assert_allclose(out.data[:, 4:], out_rev.data[::-1, :4], atol=1e-14)

    def test_zero_weights_zero_output(self):
        x = Tensor(np.random.default_rng(3).normal(size=(4, 3)))
        out = layers.run_bilstm([(zero_cell(3, 2), zero_cell(3, 2))], x)
        np.testing.assert_array_equal(out.data, np.zeros((4, 4)))

    def test_empty_sequence_rejected(self):
        with pytest.raises(ContractError):
            layers.run_bilstm([(zero_cell(3, 2), zero_cell(3, 2))], Tensor(np.zeros((0, 3))))

    def test_stacked_gradients(self):
        rng = np.random.default_rng(4)
        l1 = (layers.LstmCellParams.init(rng, 2, 3), layers.LstmCellParams.init(rng, 2, 3))
        l2 = (layers.LstmCellParams.init(rng, 6, 2), layers.LstmCellParams.init(rng, 6, 2))
        x = Tensor.param(rng.uniform(-1, 1, size=(4, 2)))
        params = [x] + [t for pair in (l1, l2) for cell in pair for _, t in cell.tensors()]

        def forward():
            out = layers.run_bilstm([l1, l2], x)
            return ad.sum_all(ad.mul(out, out))

        check_gradients(forward, params, atol=1e-6, rtol=1e-4)


class TestConvBn:
    def make_layer(self, rng, in_dim=3, channels=4):
        return layers.ConvLayer.init(rng, in_dim, channels)

    def test_frozen_identity_stats_is_plain_conv_relu(self):
        rng = np.random.default_rng(5)
        layer = self.make_layer(rng)
        layer.bn.set_mode("frozen")
        x = Tensor(rng.normal(size=(6, 3)))
        out = layer.forward(x)
        win = ad.time_windows(x, 3, 2, 1)
        raw = ad.linear(win, layer.weight, layer.bias)
        expected = np.maximum((raw.data - 0.0) / np.sqrt(1.0 + layers.BN_EPS), 0.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-14)

    def test_train_mode_centers_constant_channels(self):
        rng = np.random.default_rng(6)
        layer = self.make_layer(rng)
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 1.7  # constant pre-BN channel value
        x = Tensor(rng.normal(size=(8, 3)))
        out = layer.forward(x)
        # Normalized constant channel is 0 before scale/shift; shift is 0 -> relu(0) = 0.
        np.testing.assert_allclose(out.data, np.zeros_like(out.data), atol=1e-12)

    def test_train_mode_running_stat_updates_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(8, 3))
        stats = []
        for _ in range(2):
            layer = layers.ConvLayer.init(np.random.default_rng(7), 3, 4)
            layer.forward(Tensor(x))
            stats.append((layer.bn.running_mean.copy(), layer.bn.running_var.copy()))
        np.testing.assert_array_equal(stats[0][0], stats[1][0])
        np.testing.assert_array_equal(stats[0][1], stats[1][1])

    def test_eval_mode_never_writes_running_stats(self):
        rng = np.random.default_rng(8)
        for mode in ("eval", "frozen"):
            layer = self.make_layer(rng)
            layer.bn.set_mode(mode)
            layer.bn.running_mean = rng.normal(size=4)
            layer.bn.running_var = rng.uniform(0.5, 2.0, size=4)
            before = layer.bn.running_mean.copy(), layer.bn.running_var.copy()
            layer.forward(Tensor(rng.normal(size=(7, 3))))
            np.testing.assert_array_equal(layer.bn.running_mean, before[0])
            np.testing.assert_array_equal(layer.bn.running_var, before[1])

    def test_too_short_input_rejected(self):
        rng = np.random.default_rng(9)
        layer = layers.ConvLayer.init(rng, 3, 4, kernel=5, stride=1)
        with pytest.raises(ContractError):
            layer.forward(Tensor(np.zeros((2, 3))))

    def test_gradients_train_mode(self):
        rng = np.random.default_rng(10)
        layer = self.make_layer(rng)
        x = Tensor.param(rng.uniform(-1, 1, size=(6, 3)))
        params = [x, layer.weight, layer.bias, layer.bn.scale, layer.bn.shift]

        def forward():
            # Running stats are overwritten by every probe call; restore after.
            mean, var = layer.bn.running_mean.copy(), layer.bn.running_var.copy()
            out = layer.forward(x)
            layer.bn.running_mean, layer.bn.running_var = mean, var
            return ad.sum_all(ad.mul(out, out))

        check_gradients(forward, params, atol=2e-6, rtol=1e-4)

    def test_invalid_momentum(self):
        with pytest.raises(ContractError):
            layers.BatchNormState.init(4, momentum=0.0)


class TestAttention:
    def make_params(self, rng, q=4, k=6, a=3):
        return layers.AttentionParams.init(rng, q, k, a)

    def test_single_key_forces_weight_one(self):
        rng = np.random.default_rng(11)
        params = self.make_params(rng)
        keys = Tensor(rng.normal(size=(1, 6)))
        ctx, w = layers.attention_step(params, Tensor(rng.normal(size=4)), keys)
        np.testing.assert_allclose(w.data, [1.0])
        np.testing.assert_allclose(ctx.data, keys.data[0])

    def test_identical_keys_give_uniform_weights(self):
        rng = np.random.default_rng(12)
        params = self.make_params(rng)
        key = rng.normal(size=6)
        keys = Tensor(np.tile(key, (5, 1)))
        ctx, w = layers.attention_step(params, Tensor(rng.normal(size=4)), keys)
        np.testing.assert_allclose(w.data, np.full(5, 0.2), atol=1e-12)
        np.testing.assert_allclose(ctx.data, key, atol=1e-12)

    def test_weights_sum_to_one_and_context_in_hull(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            params = self.make_params(rng)
            keys = Tensor(rng.normal(size=(rng.integers(2, 9), 6)))
            ctx, w = layers.attention_step(params, Tensor(rng.normal(size=4)), keys)
            assert (w.data >= 0).all()
            assert abs(w.data.sum() - 1.0) <= 1e-12
            assert (ctx.data >= keys.data.min(axis=0) - 1e-12).all()
            assert (ctx.data <= keys.data.max(axis=0) + 1e-12).all()

    def test_empty_keys_rejected(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ContractError):
            layers.attention_step(self.make_params(rng), Tensor(np.zeros(4)), Tensor(np.zeros((0, 6))))

    def test_gradients(self):
        rng = np.random.default_rng(15)
        params = self.make_params(rng)
        query = Tensor.param(rng.uniform(-1, 1, size=4))
        keys = Tensor.param(rng.uniform(-1, 1, size=(5, 6)))

        def forward():
            ctx, w = layers.attention_step(params, query, keys)
            return ad.sum_all(ad.mul(ctx, ctx))

        check_gradients(
            forward, [query, keys, params.w_query, params.w_key, params.v], atol=1e-6, rtol=1e-4
        )


class TestEmbedProject:
    def test_one_hot_table_recovers_unit_rows(self):
        table = Tensor.param(np.eye(5))
        out = layers.embed(table, 3)
        np.testing.assert_array_equal(out.data, np.eye(5)[3])

    def test_zero_projection_gives_uniform_softmax(self):
        w = Tensor.param(np.zeros((7, 4)))
        logits = layers.project(w, Tensor(np.random.default_rng(16).normal(size=4)))
        probs = ad.softmax_row(logits).data
        np.testing.assert_allclose(probs, np.full(7, 1.0 / 7.0), atol=1e-15)

    def test_embedding_gradient_only_on_looked_up_rows(self):
        rng = np.random.default_rng(17)
        table = Tensor.param(rng.normal(size=(6, 3)))
        with ad.record():
            out = layers.embed(table, 2)
            ad.backward(ad.sum_all(out))
        nonzero_rows = np.nonzero((table.grad != 0).any(axis=1))[0]
        np.testing.assert_array_equal(nonzero_rows, [2])

    def test_out_of_range_token(self):
        with pytest.raises(IndexError):
            layers.embed(Tensor(np.zeros((4, 2))), 4)
