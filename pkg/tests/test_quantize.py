import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facevq.errors import ConfigError, ShapeError
from facevq.quantize import (
    Codebook,
    CodeIndexGrid,
    code_loss,
    counting_prior_kl,
    marginal_prior_kl,
    motion_residual,
    nn_quantize,
    split_latents,
    st_lookup,
    straight_through,
    temporal_attention,
    utilization,
)


def exhaustive_argmin(flat: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Independent oracle: per-cell loop over all items, lowest index wins."""
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i, cell in enumerate(flat):
        best, best_d = 0, np.inf
        for j, item in enumerate(items):
            d = float(np.sqrt(((cell - item) ** 2).sum()))
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


def attention_oracle(vectors: np.ndarray) -> np.ndarray:
    """Hand-rolled softmax attention over one location's frame vectors."""
    scores = vectors @ vectors.T
    ex = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights = ex / ex.sum(axis=1, keepdims=True)
    return weights @ vectors


class TestTemporalAttention:
    def test_single_frame_is_identity(self):
        z = torch.randn(1, 3, 3, 8)
        assert torch.allclose(temporal_attention(z), z)

    def test_constant_over_time_is_identity(self):
        frame = torch.randn(1, 4, 4, 8)
        z = frame.expand(5, 4, 4, 8).clone()
        assert torch.allclose(temporal_attention(z), z, atol=1e-6)

    def test_two_frame_oracle(self):
        z = torch.randn(2, 1, 1, 6, dtype=torch.float64)
        expected = attention_oracle(z[:, 0, 0, :].numpy())
        got = temporal_attention(z)[:, 0, 0, :].numpy()
        np.testing.assert_allclose(got, expected, atol=1e-5)

    def test_oracle_on_batched_grid(self):
        z = torch.randn(2, 3, 2, 2, 4, dtype=torch.float64)
        got = temporal_attention(z)
        for b in range(2):
            for i in range(2):
                for j in range(2):
                    expected = attention_oracle(z[b, :, i, j, :].numpy())
                    np.testing.assert_allclose(got[b, :, i, j, :].numpy(), expected, atol=1e-5)


class TestMotionResidual:
    def test_constant_over_time_is_zero(self):
        z = torch.randn(1, 2, 2, 4).expand(6, 2, 2, 4).clone()
        assert torch.equal(motion_residual(z, 1), torch.zeros_like(z))

    def test_two_frames_window_one(self):
        a, b = torch.randn(1, 1, 3), torch.randn(1, 1, 3)
        z = torch.stack([a, b])
        out = motion_residual(z, 1)
        assert torch.equal(out[0], torch.zeros_like(a))
        assert torch.equal(out[1], b - a)

    def test_window_two_subtraction_oracle(self):
        z = torch.randn(4, 2, 2, 5)
        out = motion_residual(z, 2)
        expected = z.clone()
        for tau in range(4):
            expected[tau] = z[tau] - z[max(tau - 2, 0)]
        assert torch.equal(out, expected)

    def test_window_beyond_length_references_frame_zero(self):
        z = torch.randn(3, 1, 1, 2)
        out = motion_residual(z, 10)
        assert torch.equal(out, z - z[0])

    def test_invalid_window(self):
        with pytest.raises(ConfigError):
            motion_residual(torch.randn(2, 1, 1, 2), 0)


class TestSplitLatents:
    def test_spatial_branch_is_untouched(self):
        z = torch.randn(3, 2, 2, 4)
        z_s, _ = split_latents(z, 1)
        assert z_s is z

    def test_constant_clip_temporal_branch_equals_input(self):
        z = torch.randn(1, 2, 2, 4).expand(4, 2, 2, 4).clone()
        _, z_t = split_latents(z, 1)
        assert torch.allclose(z_t, z, atol=1e-6)

    def test_matches_component_oracles(self):
        z = torch.randn(4, 2, 2, 6)
        _, z_t = split_latents(z, 2)
        assert torch.allclose(z_t, temporal_attention(z) + motion_residual(z, 2))


class TestNNQuantize:
    def test_exact_item_retrieved_at_zero_distance(self):
        cb = Codebook(16, 4, "spatial")
        z = cb.weight[7].detach().reshape(1, 1, 1, 4).clone()
        indices, quantized = nn_quantize(z, cb)
        assert indices.item() == 7
        assert torch.equal(quantized.reshape(4), cb.weight[7].detach())

    def test_two_item_example(self):
        cb = Codebook(2, 2, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
        indices, _ = nn_quantize(torch.tensor([[[[0.9, 0.8]]]]), cb)
        assert indices.item() == 1  # d0^2 = 1.45 > d1^2 = 0.05

    def test_matches_exhaustive_oracle(self):
        torch.manual_seed(3)
        cb = Codebook(16, 4, "spatial")
        z = torch.randn(4, 4, 4, 4)
        indices, _ = nn_quantize(z, cb)
        expected = exhaustive_argmin(
            z.reshape(-1, 4).numpy(), cb.weight.detach().numpy()
        ).reshape(4, 4, 4)
        np.testing.assert_array_equal(indices.numpy(), expected)

    def test_tie_breaks_to_lowest_index(self):
        cb = Codebook(3, 1, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.tensor([[-1.0], [1.0], [1.0]]))
        indices, _ = nn_quantize(torch.tensor([[[[0.0]]], [[[1.0]]]]), cb)
        assert indices.reshape(-1).tolist() == [0, 1]

    def test_idempotent_on_quantized_output(self):
        cb = Codebook(8, 3, "temporal")
        z = torch.randn(2, 2, 2, 3)
        i1, q1 = nn_quantize(z, cb)
        i2, q2 = nn_quantize(q1.detach(), cb)
        assert torch.equal(i1, i2)
        assert torch.equal(q1.detach(), q2.detach())

    def test_scale_covariance_of_retrieval(self):
        cb = Codebook(8, 3, "spatial")
        z = torch.randn(2, 2, 2, 3)
        i1, _ = nn_quantize(z, cb)
        scaled = Codebook(8, 3, "spatial")
        with torch.no_grad():
            scaled.weight.copy_(cb.weight * 3.7)
        i2, _ = nn_quantize(z * 3.7, scaled)
        assert torch.equal(i1, i2)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            nn_quantize(torch.randn(1, 1, 1, 5), Codebook(4, 3, "spatial"))

    @settings(max_examples=30, deadline=None)
    @given(
        n=st.integers(2, 64),
        d=st.integers(1, 8),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_property_matches_exhaustive_oracle(self, n, d, seed):
        rng = np.random.default_rng(seed)
        items = rng.standard_normal((n, d)).astype(np.float32)
        cells = rng.standard_normal((3, 4, 2, d)).astype(np.float32)
        cb = Codebook(n, d, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.from_numpy(items))
        indices, _ = nn_quantize(torch.from_numpy(cells), cb)
        expected = exhaustive_argmin(cells.reshape(-1, d), items).reshape(3, 4, 2)
        np.testing.assert_array_equal(indices.numpy(), expected)


class TestSTLookup:
    def test_fusion_is_elementwise_sum(self):
        cs, ct = Codebook(8, 4, "spatial"), Codebook(8, 4, "temporal")
        z = torch.randn(2, 2, 2, 4)
        z_q, i_s, i_t = st_lookup(z, cs, ct, window=1)
        z_s, z_t = split_latents(z, 1)
        _, q_s = nn_quantize(z_s, cs)
        _, q_t = nn_quantize(z_t, ct)
        assert torch.equal(z_q.detach(), (q_s + q_t).detach())

    def test_zero_codebooks_give_zero_output(self):
        cs, ct = Codebook(4, 3, "spatial"), Codebook(4, 3, "temporal")
        with torch.no_grad():
            cs.weight.zero_()
            ct.weight.zero_()
        z_q, _, _ = st_lookup(torch.randn(2, 2, 2, 3), cs, ct)
        assert torch.equal(z_q.detach(), torch.zeros(2, 2, 2, 3))

    def test_composition_matches_oracles(self):
        torch.manual_seed(5)
        cs, ct = Codebook(6, 3, "spatial"), Codebook(5, 3, "temporal")
        z = torch.randn(3, 2, 2, 3)
        z_q, i_s, i_t = st_lookup(z, cs, ct, window=1)
        z_s, z_t = split_latents(z, 1)
        exp_s = exhaustive_argmin(z_s.reshape(-1, 3).numpy(), cs.weight.detach().numpy())
        exp_t = exhaustive_argmin(
            z_t.detach().reshape(-1, 3).numpy(), ct.weight.detach().numpy()
        )
        np.testing.assert_array_equal(i_s.reshape(-1).numpy(), exp_s)
        np.testing.assert_array_equal(i_t.reshape(-1).numpy(), exp_t)
        fused = cs.weight.detach().numpy()[exp_s] + ct.weight.detach().numpy()[exp_t]
        np.testing.assert_allclose(z_q.detach().reshape(-1, 3).numpy(), fused, rtol=1e-6)


class TestStraightThrough:
    def test_forward_equals_quantized(self):
        z, z_q = torch.randn(2, 2, 2, 3), torch.randn(2, 2, 2, 3)
        assert torch.equal(straight_through(z, z_q), z_q)

    def test_identity_jacobian_for_sum(self):
        z = torch.randn(2, 2, 2, 3, requires_grad=True)
        z_q = torch.randn(2, 2, 2, 3)
        straight_through(z, z_q).sum().backward()
        assert torch.equal(z.grad, torch.ones_like(z))

    def test_gradient_equals_downstream_gradient(self):
        z = torch.randn(1, 2, 2, 4, requires_grad=True, dtype=torch.float64)
        z_q = torch.randn(1, 2, 2, 4, dtype=torch.float64)
        weight = torch.randn(4, 4, dtype=torch.float64)
        out = straight_through(z, z_q) @ weight
        loss = out.pow(2).sum()
        loss.backward()
        direct = z_q.clone().requires_grad_(True)
        (direct @ weight).pow(2).sum().backward()
        assert torch.allclose(z.grad, direct.grad)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            straight_through(torch.randn(2, 1, 1, 2), torch.randn(1, 1, 1, 2))


def mpr_oracle(latents: np.ndarray, items: np.ndarray) -> tuple[np.ndarray, float]:
    """Arithmetic oracle: distances, row normalization, marginal, KL."""
    m, n = latents.shape[0], items.shape[0]
    dist = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            dist[i, j] = max(math.sqrt(((latents[i] - items[j]) ** 2).sum()), 1e-8)
    scores = 1.0 / dist
    scores = scores / scores.sum(axis=1, keepdims=True)
    posterior = scores.sum(axis=0) / m
    kl = float(sum(p * math.log(p * n) for p in posterior if p > 0))
    return posterior, kl


class TestMarginalPriorKL:
    def test_uniform_posterior_gives_zero(self):
        # one latent equidistant from all items: posterior is exactly uniform
        cb = Codebook(4, 4, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.eye(4))
        report = marginal_prior_kl(torch.zeros(1, 1, 1, 4), cb)
        assert abs(float(report.kl_value)) <= 1e-6
        assert torch.allclose(report.posterior, torch.full((4,), 0.25))

    def test_posterior_sums_to_one(self):
        cb = Codebook(8, 3, "spatial")
        report = marginal_prior_kl(torch.randn(2, 2, 2, 3), cb)
        assert float(report.posterior.sum()) == pytest.approx(1.0, abs=1e-6)
        assert (report.posterior >= 0).all()

    def test_one_hot_posterior_gives_log_n(self):
        cb = Codebook(2, 2, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.tensor([[0.0, 0.0], [100.0, 100.0]]))
        report = marginal_prior_kl(torch.zeros(1, 1, 1, 2), cb)
        assert float(report.kl_value) == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_arithmetic_oracle(self):
        latents = np.array([[0.0, 1.0], [2.0, -1.0]])
        items = np.array([[0.5, 0.5], [-1.0, 2.0]])
        cb = Codebook(2, 2, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.from_numpy(items).float())
        report = marginal_prior_kl(torch.from_numpy(latents).float().reshape(2, 1, 1, 2), cb)
        exp_post, exp_kl = mpr_oracle(latents, items)
        np.testing.assert_allclose(report.posterior.detach().numpy(), exp_post, atol=1e-6)
        assert float(report.kl_value) == pytest.approx(exp_kl, abs=1e-6)

    def test_latent_exactly_on_item_is_safe(self):
        cb = Codebook(3, 2, "spatial")
        z = cb.weight[1].detach().reshape(1, 1, 1, 2).clone()
        report = marginal_prior_kl(z, cb)
        assert torch.isfinite(report.kl_value)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 16), m=st.integers(1, 12))
    def test_kl_nonnegative(self, seed, n, m):
        rng = np.random.default_rng(seed)
        cb = Codebook(n, 3, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.from_numpy(rng.standard_normal((n, 3))).float())
        z = torch.from_numpy(rng.standard_normal((m, 1, 1, 3))).float()
        assert float(marginal_prior_kl(z, cb).kl_value) >= 0.0

    def test_gradients_reach_unused_items(self):
        # the soft-mass marginal feeds gradient to items that are never retrieved
        cb = Codebook(4, 2, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.tensor([[0.0, 0.0], [9.0, 9.0], [9.0, -9.0], [-9.0, 9.0]]))
        z = torch.zeros(4, 1, 1, 2) + torch.tensor([0.1, 0.0])
        marginal_prior_kl(z, cb).kl_value.backward()
        assert cb.weight.grad is not None
        assert cb.weight.grad[1:].abs().max() > 0


class TestCountingPriorKL:
    def test_uniform_counts_give_zero(self):
        cb = Codebook(2, 1, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.tensor([[-1.0], [1.0]]))
        z = torch.tensor([-1.0, 1.0]).reshape(2, 1, 1, 1)
        assert float(counting_prior_kl(z, cb).kl_value) == pytest.approx(0.0, abs=1e-6)

    def test_collapsed_counts_give_log_n(self):
        cb = Codebook(4, 1, "spatial")
        with torch.no_grad():
            cb.weight.copy_(torch.tensor([[0.0], [5.0], [6.0], [7.0]]))
        z = torch.zeros(8, 1, 1, 1)
        assert float(counting_prior_kl(z, cb).kl_value) == pytest.approx(math.log(4), abs=1e-5)


class TestCodeLoss:
    def test_zero_when_equal(self):
        z = torch.randn(2, 2, 2, 3)
        assert float(code_loss(z, z.clone())) == 0.0

    def test_all_ones_offset_closed_form(self):
        z = torch.zeros(2, 3, 3, 4)
        z_q = torch.ones(2, 3, 3, 4)
        # mean reduction: each squared term is 1, so loss = 1 + beta
        assert float(code_loss(z, z_q, beta=0.25)) == pytest.approx(1.25)

    def test_first_term_routes_gradient_to_codebook_only(self):
        cb = Codebook(4, 3, "spatial")
        z = torch.randn(2, 1, 1, 3, requires_grad=True)
        _, q = nn_quantize(z, cb)
        loss = code_loss(z, q, beta=0.0)
        loss.backward()
        assert cb.weight.grad is not None and cb.weight.grad.abs().max() > 0
        assert z.grad is None or z.grad.abs().max() == 0

    def test_codebook_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        cb = Codebook(4, 3, "spatial")
        cb.double()
        z = torch.randn(3, 1, 1, 3, dtype=torch.float64)
        indices, q = nn_quantize(z, cb)
        loss = code_loss(z, q, beta=0.25)
        loss.backward()
        eps = 1e-6
        item, comp = int(indices.reshape(-1)[0]), 1

        # FD oracle with the stop-gradient contract: indices stay fixed and
        # the sg(z_q) commitment term stays at its base-point value, so only
        # the first term varies with the perturbed codebook entry
        q_base = q.detach().clone()

        def evaluate():
            q_varied = cb.weight[indices]
            t1 = float(((q_varied - z) ** 2).mean())
            t2 = 0.25 * float(((z - q_base) ** 2).mean())
            return t1 + t2

        with torch.no_grad():
            orig = cb.weight[item, comp].item()
            cb.weight[item, comp] = orig + eps
            up = evaluate()
            cb.weight[item, comp] = orig - eps
            down = evaluate()
            cb.weight[item, comp] = orig
        fd = (up - down) / (2 * eps)
        assert cb.weight.grad[item, comp].item() == pytest.approx(fd, rel=1e-3)

    def test_negative_beta_rejected(self):
        with pytest.raises(ConfigError):
            code_loss(torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, 1), beta=-1.0)


class TestUtilization:
    def test_single_active_item(self):
        indices = torch.zeros(4, 4, 4, dtype=torch.int64)
        assert utilization(indices, 1024) == pytest.approx(1 / 1024)

    def test_full_coverage(self):
        indices = torch.arange(16).reshape(1, 4, 4)
        assert utilization(indices, 16) == 1.0

    def test_random_uniform_covers_everything(self):
        rng = np.random.default_rng(0)
        indices = torch.from_numpy(rng.integers(0, 16, size=(16, 16, 16)))
        assert utilization(indices, 16) == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ShapeError):
            utilization(torch.tensor([[[99]]]), 16)


class TestStaticVideoProperty:
    def test_constant_clip_temporal_indices_constant_over_time(self):
        torch.manual_seed(2)
        cs, ct = Codebook(8, 4, "spatial"), Codebook(8, 4, "temporal")
        frame = torch.randn(1, 3, 3, 4)
        z = frame.expand(5, 3, 3, 4).clone()
        _, i_s, i_t = st_lookup(z, cs, ct, window=1)
        assert torch.equal(motion_residual(z, 1), torch.zeros_like(z))
        for tau in range(1, 5):
            assert torch.equal(i_t[tau], i_t[0])
            assert torch.equal(i_s[tau], i_s[0])


class TestCodeIndexGrid:
    def test_wrapper_validates(self):
        CodeIndexGrid(torch.zeros(2, 2, 2, dtype=torch.int64), "spatial")
        with pytest.raises(ShapeError):
            CodeIndexGrid(torch.zeros(2, 2, dtype=torch.int64), "spatial")
        with pytest.raises(ShapeError):
            CodeIndexGrid(-torch.ones(1, 1, 1, dtype=torch.int64), "temporal")
