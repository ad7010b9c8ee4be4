"""
Tests the two attention branches, role quantization and binding in
attention.py
"""

import math

import numpy as np
import pytest

from r3_captioner.attention import (
    BranchWeights,
    R3MultiHeadAttention,
    RoleCodebook,
    codebook_stats,
    general_relativity,
    merge_heads,
    project_qkv,
    quantize,
    r3_bind,
    special_relativity,
    split_heads,
)
from r3_captioner.errors import ContractError, DimensionError, RangeError
from r3_captioner.positions import BiasTable, bias_matrix
from r3_captioner.tensor import Tensor, finite_diff_check, matmul, mul, tensor_sum


@pytest.fixture()
def rng():
    return np.random.default_rng(11)


def central_differences(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """
    Numerical gradient of a numpy-valued scalar function.
    """

    grad = np.zeros_like(x)

    for i in np.ndindex(x.shape):
        upper, lower = x.copy(), x.copy()
        upper[i] += eps
        lower[i] -= eps
        grad[i] = (f(upper) - f(lower)) / (2 * eps)

    return grad


class TestHeads:
    def test_split_then_merge(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8)))
        heads = split_heads(x, 2)

        assert heads.shape == (2, 2, 3, 4)
        assert np.array_equal(heads.data[:, 1], x.data[..., 4:])
        assert np.array_equal(merge_heads(heads).data, x.data)

    def test_indivisible_width(self, rng):
        with pytest.raises(DimensionError):
            split_heads(Tensor(rng.normal(size=(3, 7))), 2)

    def test_project_qkv_shapes(self, rng):
        weights = BranchWeights(d_model=8, heads=2, d_k=4, seed=0)
        x = Tensor(rng.normal(size=(1, 5, 8)))
        q, k, v = project_qkv(x, x, x, weights)

        assert q.shape == k.shape == v.shape == (1, 2, 5, 4)


class TestSpecialRelativity:
    """
    Tests scaled dot-product attention.
    """

    def test_identical_keys_average_values(self, rng):
        """
        Equal keys give uniform weights, so the output is the mean
        value.
        """

        q = Tensor(rng.normal(size=(2, 4)))
        k = Tensor(np.ones((3, 4)))
        v = Tensor(rng.normal(size=(3, 4)))

        out = special_relativity(q, k, v)

        assert np.allclose(out.data, v.data.mean(axis=0))

    def test_scaling(self, rng):
        """
        Scores are divided by sqrt(d_k).
        """

        q = Tensor([[1.0, 0.0, 0.0, 0.0]])
        k = Tensor([[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        v = Tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])

        weight = math.exp(1.0) / (math.exp(1.0) + 1.0)

        assert special_relativity(q, k, v).data[0, 0] == pytest.approx(weight)

    def test_causal_first_row_sees_only_itself(self, rng):
        q = Tensor(rng.normal(size=(3, 4)))
        v = Tensor(rng.normal(size=(3, 4)))

        out = special_relativity(q, q, v, causal=True)

        assert np.allclose(out.data[0], v.data[0])

    def test_masked_key_ignored(self, rng):
        q = Tensor(rng.normal(size=(2, 4)))
        k = Tensor(rng.normal(size=(3, 4)))
        v = Tensor(rng.normal(size=(3, 4)))

        masked = special_relativity(q, k, v, mask=np.array([True, True, False]))
        short = special_relativity(q, Tensor(k.data[:2]), Tensor(v.data[:2]))

        assert np.allclose(masked.data, short.data)

    def test_empty_context(self, rng):
        empty = Tensor(np.ones((0, 4)))

        with pytest.raises(ContractError):
            special_relativity(Tensor(np.ones((2, 4))), empty, empty)

    def test_fully_masked_row(self):
        with pytest.raises(ContractError):
            special_relativity(
                Tensor(np.ones((1, 4))),
                Tensor(np.ones((2, 4))),
                Tensor(np.ones((2, 4))),
                mask=np.array([False, False]),
            )

    def test_gradient(self, rng):
        k = Tensor(rng.normal(size=(3, 4)))
        v = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(2, 4)))
        q = Tensor(rng.normal(size=(2, 4)))

        error = finite_diff_check(lambda t: tensor_sum(mul(special_relativity(t, k, v), w)), q)

        assert error < 1e-4


class TestGeneralRelativity:
    """
    Tests unscaled attention with a relative-position bias.
    """

    def test_large_bias_selects_key(self):
        """
        With orthogonal queries and keys the bias alone decides.
        """

        q = Tensor([[[1.0, 0.0]]])
        k = Tensor([[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]])
        v = Tensor([[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]])
        bias = Tensor([[[0.0, 10.0, 0.0]]])

        out = general_relativity(q, k, v, bias=bias)
        weight = math.exp(10.0) / (math.exp(10.0) + 2.0)

        others = (1 - weight) / 2 * (v.data[0, 0] + v.data[0, 2])

        assert np.allclose(out.data[0, 0], weight * v.data[0, 1] + others)
        assert np.allclose(out.data[0, 0], v.data[0, 1], atol=1e-3)

    def test_unscaled(self):
        q = Tensor([[1.0, 0.0, 0.0, 0.0]])
        k = Tensor([[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        v = Tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])

        weight = math.exp(2.0) / (math.exp(2.0) + 1.0)

        assert general_relativity(q, k, v).data[0, 0] == pytest.approx(weight)

    def test_bias_shape_checked(self, rng):
        q = Tensor(rng.normal(size=(2, 3, 4)))

        with pytest.raises(DimensionError):
            general_relativity(q, q, q, bias=Tensor(np.zeros((2, 3, 2))))

    def test_bias_gradient(self, rng):
        """
        Gradients reach the bucket table through the lookup.
        """

        table = BiasTable(heads=2, bidirectional=True, seed=0, init_std=1.0)
        q = Tensor(rng.normal(size=(2, 3, 4)))
        k = Tensor(rng.normal(size=(2, 5, 4)))
        v = Tensor(rng.normal(size=(2, 5, 4)))
        w = Tensor(rng.normal(size=(2, 3, 4)))

        def f(buckets):
            table.buckets = buckets
            return tensor_sum(mul(general_relativity(q, k, v, bias=bias_matrix(3, 5, table)), w))

        assert finite_diff_check(f, table.buckets) < 1e-4


class TestQuantize:
    """
    Tests role selection, the role loss and the straight-through
    gradient.
    """

    @pytest.fixture()
    def codebook(self):
        return RoleCodebook(roles=5, d_k=4, similarity_dropout=0.0, seed=3)

    def test_selects_most_similar_role(self, codebook, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        result = quantize(x, codebook)

        embeddings = codebook.embeddings.data
        units = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
        rows = x.data / np.linalg.norm(x.data, axis=-1, keepdims=True)

        assert np.array_equal(result.indices, (rows @ units.T).argmax(axis=-1))
        assert np.allclose(result.z_q.data, units[result.indices])

    def test_scale_invariant(self, codebook, rng):
        """
        Positive scaling of the input does not change the selection.
        """

        x = rng.normal(size=(6, 4))

        first = quantize(Tensor(x), codebook).indices
        scaled = quantize(Tensor(2.5 * x), codebook).indices

        assert np.array_equal(first, scaled)

    def test_ties_go_to_lowest_index(self):
        codebook = RoleCodebook(roles=3, d_k=2, similarity_dropout=0.0)
        codebook.embeddings.data = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])

        result = quantize(Tensor([[1.0, 0.0], [1.0, 1.0]]), codebook)

        assert result.indices.tolist() == [1, 0]

    def test_zero_loss_on_codebook_rows(self, codebook):
        """
        Inputs that already are (scaled) roles cost nothing.
        """

        x = Tensor(3.0 * codebook.embeddings.data[[4, 1, 1]])
        result = quantize(x, codebook)

        assert result.indices.tolist() == [4, 1, 1]
        assert result.loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_loss_value(self):
        """
        Loss per row is (1 + beta) * squared distance of the unit
        vectors, averaged over rows.
        """

        codebook = RoleCodebook(roles=1, d_k=2, similarity_dropout=0.0)
        codebook.embeddings.data = np.array([[1.0, 0.0]])

        result = quantize(Tensor([[1.0, 1.0], [1.0, 0.0]]), codebook, beta=0.25)
        distance = (1 - 1 / math.sqrt(2)) ** 2 + 0.5

        assert result.loss.item() == pytest.approx(1.25 * distance / 2)

    def test_invalid_rows_excluded(self, codebook, rng):
        x = rng.normal(size=(3, 4))

        full = quantize(Tensor(x[:2]), codebook)
        masked = quantize(Tensor(x), codebook, valid=np.array([True, True, False]))

        assert masked.loss.item() == pytest.approx(full.loss.item())

    def test_no_valid_rows(self, codebook, rng):
        with pytest.raises(ContractError):
            quantize(Tensor(rng.normal(size=(2, 4))), codebook, valid=np.zeros(2, dtype=bool))

    def test_width_mismatch(self, codebook):
        with pytest.raises(DimensionError):
            quantize(Tensor(np.ones((2, 3))), codebook)

    def test_similarity_dropout_only_in_training(self, rng):
        """
        Outside training similarity dropout never changes the choice.
        """

        codebook = RoleCodebook(roles=8, d_k=4, similarity_dropout=0.9, seed=0)
        clean = RoleCodebook(roles=8, d_k=4, similarity_dropout=0.0, seed=0)
        x = Tensor(rng.normal(size=(20, 4)))

        assert np.array_equal(quantize(x, codebook).indices, quantize(x, clean).indices)

        trained = [quantize(x, codebook, training=True, seed=s).indices for s in range(5)]
        assert any(not np.array_equal(t, quantize(x, clean).indices) for t in trained)

    def test_dropped_roles_never_selected(self):
        """
        In training the choice is the best surviving role; a row whose
        roles are all dropped falls back to the plain argmax.
        """

        codebook = RoleCodebook(roles=3, d_k=2, similarity_dropout=0.5, seed=0)
        codebook.embeddings = Tensor(np.array([[1.0, 0.0], [1.0, 1.0], [-1.0, 0.0]]), True)
        x = Tensor(np.tile([[-1.0, 0.0]], (200, 1)))
        similarities = np.array([-1.0, -1.0 / math.sqrt(2.0), 1.0])

        keep = np.random.default_rng(7).random((200, 3)) >= 0.5
        keep |= ~keep.any(axis=-1, keepdims=True)
        expected = np.where(keep, similarities, -np.inf).argmax(axis=-1)

        indices = quantize(x, codebook, training=True, seed=7).indices

        assert np.array_equal(indices, expected)
        assert keep[np.arange(200), indices].all()
        assert set(indices.tolist()) == {0, 1, 2}

    def test_straight_through_contract(self, codebook, rng):
        """
        d/dx of L(z_q) + loss equals dL/dz at z_q plus the gradient of
        the commitment term with the selected roles frozen.
        """

        x_data = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        beta = 0.25

        x = Tensor(x_data.copy(), requires_grad=True)
        result = quantize(x, codebook, beta=beta)
        total = tensor_sum(mul(mul(result.z_q, result.z_q), Tensor(w)))
        tensor_sum(mul(total, 1.0) + result.loss).backward()

        z = Tensor(result.z_q.data.copy(), requires_grad=True)
        tensor_sum(mul(mul(z, z), Tensor(w))).backward()

        selected = result.z_q.data.copy()

        def commitment(values):
            units = values / np.linalg.norm(values, axis=-1, keepdims=True)
            return beta * np.sum((units - selected) ** 2) / values.shape[0]

        expected = z.grad + central_differences(commitment, x_data)

        assert np.allclose(x.grad, expected, atol=1e-7)

    def test_only_selected_roles_get_gradient(self, rng):
        """
        The dictionary term pulls the selected roles towards the
        inputs; roles nobody picked stay where they are.
        """

        codebook = RoleCodebook(roles=6, d_k=4, similarity_dropout=0.0, seed=5)
        x = Tensor(rng.normal(size=(4, 4)))

        result = quantize(x, codebook)
        result.loss.backward()

        picked = np.zeros(6, dtype=bool)
        picked[result.indices] = True

        assert not codebook.embeddings.grad[~picked].any()
        assert np.abs(codebook.embeddings.grad[picked]).sum(axis=1).min() > 0.0


class TestCodebookStats:
    def test_histogram_and_perplexity(self):
        stats = codebook_stats(np.array([0, 0, 0, 2]), roles=3)

        assert stats.histogram.tolist() == [3, 0, 1]
        assert stats.perplexity == pytest.approx(1.7548, abs=1e-4)

    def test_uniform_usage(self):
        assert codebook_stats(np.arange(4), roles=4).perplexity == pytest.approx(4.0)

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            codebook_stats(np.array([3]), roles=3)

    def test_empty(self):
        with pytest.raises(ContractError):
            codebook_stats(np.array([], dtype=int), roles=3)


class TestR3Bind:
    def test_hadamard_then_projection(self, rng):
        z = Tensor(rng.normal(size=(1, 2, 3, 2)))
        g = Tensor(rng.normal(size=(1, 2, 3, 2)))
        w_o = Tensor(rng.normal(size=(4, 5)))

        out = r3_bind(z, g, w_o)
        merged = np.concatenate([z.data[0, 0] * g.data[0, 0], z.data[0, 1] * g.data[0, 1]], axis=-1)

        assert np.allclose(out.data[0], merged @ w_o.data)

    def test_ones_binding(self, rng):
        g = Tensor(rng.normal(size=(2, 3, 2)))
        w_o = Tensor(rng.normal(size=(4, 4)))

        assert np.allclose(r3_bind(None, g, w_o).data, merge_heads(g).data @ w_o.data)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            r3_bind(Tensor(np.ones((2, 3, 2))), Tensor(np.ones((2, 2, 2))), Tensor(np.ones((4, 4))))


class TestR3MultiHeadAttention:
    """
    Tests the assembled attention site.
    """

    @pytest.fixture()
    def layer(self):
        return R3MultiHeadAttention(
            d_model=8, heads=2, d_k=4, roles=4, similarity_dropout=0.0, seed=0, init_std=0.3
        )

    def test_output_and_indices(self, layer, rng):
        x = Tensor(rng.normal(size=(2, 5, 8)))
        bias = bias_matrix(5, 5, BiasTable(heads=2, bidirectional=True))

        out = layer(x, x, bias=bias)

        assert out.output.shape == (2, 5, 8)
        assert out.quantization.indices.shape == (2, 2, 5)
        assert out.quantization.indices.max() < 4

    def test_parameter_names(self, layer):
        assert sorted(layer.named_parameters("enc0.self.")) == sorted(
            [
                "enc0.self.special.w_q",
                "enc0.self.special.w_k",
                "enc0.self.special.w_v",
                "enc0.self.general.w_q",
                "enc0.self.general.w_k",
                "enc0.self.general.w_v",
                "enc0.self.codebook",
                "enc0.self.w_o",
            ]
        )

    def test_baseline_has_no_roles(self, rng):
        layer = R3MultiHeadAttention(d_model=8, heads=2, d_k=4, roles=4, variant="baseline")
        x = Tensor(rng.normal(size=(1, 3, 8)))

        assert layer(x, x).quantization is None

    def test_baseline_equals_general_attention(self, rng):
        """
        Binding with ones leaves plain biased multi-head attention.
        """

        layer = R3MultiHeadAttention(d_model=8, heads=2, d_k=4, roles=4, variant="baseline")
        x = Tensor(rng.normal(size=(1, 3, 8)))
        bias = bias_matrix(3, 3, BiasTable(heads=2, bidirectional=True, init_std=1.0))

        q, k, v = project_qkv(x, x, x, layer.general)
        plain = matmul(merge_heads(general_relativity(q, k, v, bias=bias)), layer.w_o)

        assert np.abs(layer(x, x, bias=bias).output.data - plain.data).max() == 0.0

    def test_continuous_binding_uses_special_output(self, rng):
        """
        Quantized and continuous binding share weights but differ in
        the bound values.
        """

        kwargs = dict(d_model=8, heads=2, d_k=4, roles=4, seed=2, init_std=0.3)
        quantized = R3MultiHeadAttention(**kwargs)
        continuous = R3MultiHeadAttention(bind="continuous", **kwargs)
        x = Tensor(rng.normal(size=(1, 3, 8)))

        first, second = quantized(x, x), continuous(x, x)

        assert np.array_equal(first.quantization.indices, second.quantization.indices)
        assert not np.allclose(first.output.data, second.output.data)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            R3MultiHeadAttention(d_model=8, heads=2, d_k=4, roles=4, variant="tpr")

    def test_cross_attention_lengths(self, layer, rng):
        query = Tensor(rng.normal(size=(1, 3, 8)))
        context = Tensor(rng.normal(size=(1, 6, 8)))
        bias = bias_matrix(3, 6, BiasTable(heads=2, bidirectional=True))

        out = layer(query, context, bias=bias, key_mask=np.array([[True] * 4 + [False] * 2]))

        assert out.output.shape == (1, 3, 8)

    def test_padded_keys_do_not_matter(self, layer, rng):
        """
        Values at masked key positions never reach the output.
        """

        query = Tensor(rng.normal(size=(1, 3, 8)))
        context = rng.normal(size=(1, 4, 8))
        changed = context.copy()
        changed[0, 3] = 100.0
        mask = np.array([[True, True, True, False]])

        first = layer(query, Tensor(context), key_mask=mask)
        second = layer(query, Tensor(changed), key_mask=mask)

        assert np.allclose(first.output.data, second.output.data)

    def test_general_weight_gradient(self, layer, rng):
        """
        Weights downstream of the role selection pass the finite
        difference check.
        """

        x = Tensor(rng.normal(size=(1, 4, 8)))
        w = Tensor(rng.normal(size=(1, 4, 8)))

        def f(weight):
            layer.general.w_v = weight
            return tensor_sum(mul(layer(x, x).output, w))

        assert finite_diff_check(f, layer.general.w_v) < 1e-4

    def test_output_projection_gradient(self, layer, rng):
        x = Tensor(rng.normal(size=(1, 4, 8)))
        w = Tensor(rng.normal(size=(1, 4, 8)))

        def f(weight):
            layer.w_o = weight
            return tensor_sum(mul(layer(x, x).output, w))

        assert finite_diff_check(f, layer.w_o) < 1e-4
