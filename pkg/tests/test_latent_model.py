import pytest
import torch

from syncdg import SequencingError, ValidationError
from syncdg.latent_model import (
    HiddenStateBank,
    RecurrentState,
    SyncModel,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture()
def model():
    torch.manual_seed(0)
    return SyncModel(feature_dim=2, num_classes=2, latent_dim=6, hidden_dim=16)


def onehot(labels, num_classes=2):
    return torch.nn.functional.one_hot(labels, num_classes).to(torch.float64)


class TestEncoders:
    def test_static_shapes_and_purity(self, model):
        x = torch.randn((5, 2), dtype=torch.float64)
        post = model.encode_static(x)
        assert post.mu.shape == (5, 6)
        assert post.sigma2.shape == (5, 6)
        assert bool((post.sigma2 > 0).all())
        again = model.encode_static(x)
        assert torch.equal(post.mu, again.mu)

    def test_static_is_order_free(self, model):
        x = torch.randn((8, 2), dtype=torch.float64)
        perm = torch.randperm(8)
        post = model.encode_static(x)
        post_perm = model.encode_static(x[perm])
        assert torch.allclose(post.mu[perm], post_perm.mu)

    def test_circle_latent_width(self):
        m = SyncModel(feature_dim=2, num_classes=2, latent_dim=20, hidden_dim=16)
        post = m.encode_static(torch.randn((3, 2), dtype=torch.float64))
        assert post.mu.shape == (3, 20)

    def test_static_rejects_bad_dim(self, model):
        with pytest.raises(ValidationError):
            model.encode_static(torch.randn((4, 3), dtype=torch.float64))

    def test_dynamic_sequential_calls(self, model):
        state = model.init_state(4)
        assert torch.count_nonzero(state.h) == 0
        posts = []
        for t in range(1, 6):
            x = torch.randn((4, 2), dtype=torch.float64)
            post, state = model.encode_dynamic(x, state, t=t)
            posts.append(post)
            assert state.domain_index == t
        assert len(posts) == 5

    def test_dynamic_depends_on_history(self, model):
        x = torch.randn((3, 2), dtype=torch.float64)
        zero = model.init_state(3)
        perturbed = RecurrentState(zero.h + 0.5, zero.c - 0.25, 0)
        post_a, _ = model.encode_dynamic(x, zero)
        post_b, _ = model.encode_dynamic(x, perturbed)
        assert not torch.allclose(post_a.mu, post_b.mu)

    def test_dynamic_sequencing_error(self, model):
        state = model.init_state(2)
        x = torch.randn((2, 2), dtype=torch.float64)
        _, state = model.encode_dynamic(x, state, t=1)
        with pytest.raises(SequencingError):
            model.encode_dynamic(x, state, t=3)

    def test_drift_simplex(self, model):
        state = model.init_state(6)
        post, state = model.encode_drift(onehot(torch.tensor([0, 1, 0, 1, 1, 0])), state, t=1)
        assert post.probs.shape == (6, 2)
        assert torch.allclose(post.probs.sum(-1), torch.ones(6, dtype=torch.float64))
        assert state.domain_index == 1

    def test_drift_rejects_wrong_width(self, model):
        with pytest.raises(ValidationError):
            model.encode_drift(torch.ones((3, 5), dtype=torch.float64), model.init_state(3))


class TestPriors:
    def test_dynamic_prior_base_case(self, model):
        state = model.advance_dynamic_prior(torch.zeros((3, 6), dtype=torch.float64), model.init_state(3))
        prior = model.prior_dynamic(state)
        assert prior.mu.shape == (3, 6)
        assert bool((prior.sigma2 > 0).all())
        # unconditional: identical across batch rows
        assert torch.allclose(prior.mu[0], prior.mu[1])

    def test_feeding_samples_advances_state(self, model):
        state0 = model.advance_dynamic_prior(torch.zeros((2, 6), dtype=torch.float64), model.init_state(2))
        z = torch.randn((2, 6), dtype=torch.float64)
        state1 = model.advance_dynamic_prior(z, state0)
        assert state1.domain_index == 2
        assert not torch.allclose(state0.h, state1.h)
        p0, p1 = model.prior_dynamic(state0), model.prior_dynamic(state1)
        assert not torch.allclose(p0.mu, p1.mu)

    def test_drift_prior_shapes(self, model):
        state = model.advance_drift_prior(torch.zeros((4, 2), dtype=torch.float64), model.init_state(4))
        prior = model.prior_drift(state)
        assert prior.probs.shape == (4, 2)
        assert torch.allclose(prior.probs.sum(-1), torch.ones(4, dtype=torch.float64))

    def test_roll_drift_prior_deterministic(self, model):
        state_a, sample_a = model.roll_drift_prior(5)
        state_b, sample_b = model.roll_drift_prior(5)
        assert torch.equal(state_a.h, state_b.h)
        assert torch.equal(sample_a, sample_b)
        assert state_a.domain_index == 5
        assert float(sample_a.sum()) == 1.0


class TestDecoderMaskClassifier:
    def test_decode_shape_and_purity(self, model):
        z_st = torch.randn((4, 6), dtype=torch.float64)
        z_dy = torch.randn((4, 6), dtype=torch.float64)
        out = model.decode(z_st, z_dy)
        assert out.shape == (4, 2)
        assert torch.equal(out, model.decode(z_st, z_dy))

    def test_decode_uses_both_halves(self, model):
        z_st = torch.zeros((1, 6), dtype=torch.float64)
        z_dy = torch.zeros((1, 6), dtype=torch.float64)
        base = model.decode(z_st, z_dy)
        bump_st = model.decode(z_st + 1.0, z_dy)
        bump_dy = model.decode(z_st, z_dy + 1.0)
        assert not torch.allclose(base, bump_st)
        assert not torch.allclose(base, bump_dy)

    def test_mask_cardinality_sine_config(self):
        m = SyncModel(feature_dim=2, num_classes=2, latent_dim=32, hidden_dim=16, mask_ratio=0.6)
        assert m.mask_k == 19
        feats = torch.randn((3, 32), dtype=torch.float64)
        masked, mask = m.mask_causal(feats, "static", noise_mode="deterministic")
        assert int(mask.hard.sum(-1)[0]) == 19

    def test_full_ratio_mask_is_identity(self):
        m = SyncModel(feature_dim=2, num_classes=2, latent_dim=6, hidden_dim=16, mask_ratio=1.0)
        feats = torch.randn((4, 6), dtype=torch.float64)
        masked, mask = m.mask_causal(feats, "static", noise_mode="deterministic")
        assert torch.equal(masked, feats)

    def test_masked_out_dims_do_not_reach_classifier(self, model):
        feats = torch.randn((1, 6), dtype=torch.float64)
        masked, mask = model.mask_causal(feats, "static", noise_mode="deterministic")
        dropped = (mask.hard[0] == 0).nonzero().flatten()
        assert dropped.numel() > 0
        bumped = feats.clone()
        bumped[0, dropped] += 100.0
        masked_b, mask_b = model.mask_causal(bumped, "static", noise_mode="deterministic")
        # same selection implies identical surviving values
        z_d = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        phi_dy = torch.zeros((1, 6), dtype=torch.float64)
        if torch.equal(mask.hard, mask_b.hard):
            assert torch.equal(
                model.classify(masked, phi_dy, z_d), model.classify(masked_b, phi_dy, z_d)
            )

    def test_classifier_affine_identity(self, model):
        def parts(seed):
            g = torch.Generator().manual_seed(seed)
            return (
                torch.randn((3, 6), dtype=torch.float64, generator=g),
                torch.randn((3, 6), dtype=torch.float64, generator=g),
                torch.randn((3, 2), dtype=torch.float64, generator=g),
            )

        a, b = parts(1), parts(2)
        zero = tuple(torch.zeros_like(p) for p in a)
        lhs = model.classify(*a) + model.classify(*b) - model.classify(*zero)
        rhs = model.classify(*(pa + pb for pa, pb in zip(a, b)))
        assert torch.allclose(lhs, rhs, atol=1e-10)

    def test_classifier_zero_inputs_give_bias(self, model):
        zero = model.classify(
            torch.zeros((1, 6), dtype=torch.float64),
            torch.zeros((1, 6), dtype=torch.float64),
            torch.zeros((1, 2), dtype=torch.float64),
        )
        assert torch.allclose(zero[0], model.classifier.bias)

    def test_classifier_input_width(self, model):
        assert model.classifier.in_features == 2 * 6 + 2

    def test_variances_bounded_under_extreme_inputs(self, model):
        x = torch.full((2, 2), 1e6, dtype=torch.float64)
        post = model.encode_static(x)
        assert bool((post.sigma2 > 0).all())
        assert bool((post.sigma2 <= torch.exp(torch.tensor(8.0, dtype=torch.float64))).all())


class TestHiddenStateBank:
    def test_lifecycle(self, model):
        bank = HiddenStateBank()
        assert len(bank) == 0
        state = model.init_state(4)
        x = torch.randn((4, 2), dtype=torch.float64)
        for t in range(1, 4):
            _, state = model.encode_dynamic(x, state, t=t)
        bank.append(state)
        bank.append(state)
        assert len(bank) == 2
        assert bank.domain_index == 3
        assert bank.total_rows == 8
        bank.clear()
        assert len(bank) == 0

    def test_draw_deterministic(self, model):
        bank = HiddenStateBank()
        state = model.init_state(3)
        _, state = model.encode_dynamic(torch.randn((3, 2), dtype=torch.float64), state)
        bank.append(state)
        h1, c1 = bank.draw(5, torch.Generator().manual_seed(1))
        h2, c2 = bank.draw(5, torch.Generator().manual_seed(1))
        assert torch.equal(h1, h2) and torch.equal(c1, c2)

    def test_empty_bank_rejected(self):
        with pytest.raises(ValidationError):
            HiddenStateBank().pooled()

    def test_replace_per_sample(self):
        bank = HiddenStateBank()
        h = torch.randn((6, 16), dtype=torch.float64)
        c = torch.randn((6, 16), dtype=torch.float64)
        bank.replace_per_sample(h, c, domain_index=9)
        assert len(bank) == 6
        assert bank.domain_index == 9
        assert all(e.batch_size == 1 for e in bank.entries)

    def test_clone_is_independent(self, model):
        bank = HiddenStateBank()
        state = model.init_state(2)
        _, state = model.encode_dynamic(torch.randn((2, 2), dtype=torch.float64), state)
        bank.append(state)
        bank.drift_state = model.init_state(1)
        bank.drift_sample = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        copy = bank.clone()
        copy.entries[0].h += 1.0
        copy.drift_sample += 1.0
        assert not torch.equal(copy.entries[0].h, bank.entries[0].h)
        assert not torch.equal(copy.drift_sample, bank.drift_sample)


class TestCheckpoint:
    def test_round_trip_exact(self, model, tmp_path):
        bank = HiddenStateBank()
        state = model.init_state(3)
        _, state = model.encode_dynamic(torch.randn((3, 2), dtype=torch.float64), state, t=1)
        bank.append(state)
        drift_state, drift_sample = model.roll_drift_prior(1)
        bank.drift_state = drift_state.detached()
        bank.drift_sample = drift_sample
        path = tmp_path / "model.pt"
        save_checkpoint(path, model, bank=bank, config={"learning_rate": 0.001})
        loaded, loaded_bank, config = load_checkpoint(path)
        for key, tensor in model.state_dict().items():
            assert torch.equal(tensor, loaded.state_dict()[key])
        assert loaded.dims() == model.dims()
        assert config == {"learning_rate": 0.001}
        assert len(loaded_bank) == 1
        assert loaded_bank.domain_index == 1
        assert torch.equal(loaded_bank.entries[0].h, bank.entries[0].h)
        assert torch.equal(loaded_bank.drift_sample, bank.drift_sample)

    def test_checkpoint_without_bank(self, model, tmp_path):
        path = tmp_path / "model.pt"
        save_checkpoint(path, model)
        _, bank, config = load_checkpoint(path)
        assert bank is None
        assert config == {}


class TestConstructionValidation:
    def test_rejects_bad_mask_ratio(self):
        with pytest.raises(ValidationError):
            SyncModel(2, 2, mask_ratio=0.0)
        with pytest.raises(ValidationError):
            SyncModel(2, 2, mask_ratio=1.5)

    def test_drift_states_default_to_classes(self):
        m = SyncModel(feature_dim=2, num_classes=3, latent_dim=4, hidden_dim=8)
        assert m.drift_states == 3
