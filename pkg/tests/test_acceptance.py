"""Acceptance criteria, one marked group per criterion.

A summary line per criterion is printed at the end of the pytest run.
"""
import itertools
import os
import time

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from compgan.composition import alpha_composite, composite_weights
from compgan.evaluation import EmbeddingStats, frechet_distance
from compgan.models import SpectralNormState, StructuredGenerator, sample_latents, spectral_normalize
from compgan.orchestration import baseline_grid, enumerate_grid, structured_grid
from compgan.relational import AttentionBlock, AttentionHead, RelationalConfig, RelationalStage
from compgan.segmentation import ari_score, permutation_matched_loss
from compgan.training import adversarial_losses, gradient_penalty

from conftest import tiny_model
from oracles import (
    brute_force_matched_ce,
    dense_block,
    dense_head,
    diagonal_frechet,
    numeric_grad,
    relative_error,
)


class timed:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()

    def __exit__(self, *exc):
        elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert elapsed < self.limit, f"took {elapsed:.2f}s, budget {self.limit}s"


# 1 -------------------------------------------------------------------------------------

C1 = pytest.mark.criterion(1, "compositing identities")


@C1
def test_layer_weights_partition_of_unity():
    with timed(1.0):
        g = torch.Generator().manual_seed(1)
        alphas = torch.rand(1, 5, 100, 100, generator=g, dtype=torch.float64)  # 10^4 pixels
        w = composite_weights(alphas)
        assert (w >= 0).all()
        assert (w.sum(dim=1) - 1).abs().max().item() < 1e-6


@C1
def test_single_opaque_layer_is_exact():
    with timed(1.0):
        x = torch.rand(2, 1, 3, 8, 8)
        bg = torch.rand(2, 3, 8, 8)
        out = alpha_composite(x, torch.ones(2, 1, 1, 8, 8), bg)
        assert torch.equal(out.image, x[:, 0])


@C1
def test_transparent_layers_show_background_exactly():
    with timed(1.0):
        x = torch.rand(2, 4, 3, 8, 8)
        bg = torch.rand(2, 3, 8, 8)
        out = alpha_composite(x, torch.zeros(2, 4, 1, 8, 8), bg)
        assert torch.equal(out.image, bg)


# 2 -------------------------------------------------------------------------------------

C2 = pytest.mark.criterion(2, "attention correctness")


@C2
def test_attention_rows_are_stochastic():
    with timed(5.0):
        head = AttentionHead(latent_dim=16)
        z = torch.rand(8, 5, 16) * 2 - 1
        _, w = head.attend(z)
        assert (w >= 0).all()
        assert (w.sum(-1) - 1).abs().max().item() < 1e-6


@C2
def test_single_latent_attends_to_its_own_value():
    with timed(5.0):
        head = AttentionHead(latent_dim=16)
        z = torch.rand(3, 1, 16)
        a, w = head.attend(z)
        assert torch.equal(w, torch.ones_like(w))
        assert torch.equal(a, head.value(z))


@C2
@pytest.mark.parametrize("n_heads", [1, 2])
def test_block_matches_dense_reference(n_heads):
    with timed(5.0):
        torch.manual_seed(n_heads)
        block = AttentionBlock(latent_dim=64, n_heads=n_heads).double()
        # larger update weights than the 0.1x init so the attention path matters
        for h in block.heads:
            torch.nn.init.normal_(h.update[2].weight, std=0.3)
        z = torch.rand(4, 3, 64, dtype=torch.float64) * 2 - 1
        out = block(z).detach().numpy()
        for b in range(z.shape[0]):
            ref = dense_block(z[b].numpy(), block)
            assert np.abs(out[b] - ref).max() < 1e-6


@C2
def test_head_weights_match_dense_reference():
    with timed(5.0):
        head = AttentionHead(latent_dim=8).double()
        z = torch.rand(5, 8, dtype=torch.float64)
        _, w = head.attend(z)
        _, ref = dense_head(z.numpy(), head)
        assert np.abs(w.detach().numpy() - ref).max() < 1e-6


@C2
def test_block_is_permutation_equivariant():
    with timed(5.0):
        block = AttentionBlock(latent_dim=64, n_heads=2).double()
        z = torch.rand(2, 5, 64, dtype=torch.float64) * 2 - 1
        out = block(z)
        for perm in [torch.tensor([4, 2, 0, 1, 3]), torch.tensor([1, 0, 2, 3, 4])]:
            assert torch.allclose(block(z[:, perm]), out[:, perm], rtol=0, atol=1e-12)


# 3 -------------------------------------------------------------------------------------

C3 = pytest.mark.criterion(3, "gradient checks")
GRAD_TOL = 1e-4


def _check(fn, tensors):
    """Compare autograd against central differences for each input tensor."""
    tensors = [t.detach().clone().double().requires_grad_(True) for t in tensors]
    value = fn(*tensors)
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    for i, (t, g) in enumerate(zip(tensors, grads)):
        g = torch.zeros_like(t) if g is None else g
        def f(x, i=i):
            args = [a.detach() for a in tensors]
            args[i] = torch.from_numpy(x)
            return float(fn(*args).detach())
        num = numeric_grad(f, t.detach().numpy())
        err = relative_error(g.detach().numpy(), num)
        assert err < GRAD_TOL, f"input {i}: relative error {err:.2e}"


@C3
def test_alpha_compositing_gradients():
    with timed(60):
        g = torch.Generator().manual_seed(3)
        x = torch.rand(1, 3, 3, 4, 4, generator=g)
        a = torch.rand(1, 3, 1, 4, 4, generator=g) * 0.8 + 0.1
        bg = torch.rand(1, 3, 4, 4, generator=g)
        w = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
        _check(lambda x, a, bg: (alpha_composite(x, a, bg).image * w).sum(), [x, a, bg])


@C3
def test_attention_block_gradients_wrt_latents_and_parameters():
    with timed(60):
        torch.manual_seed(3)
        block = AttentionBlock(latent_dim=8, n_heads=2, key_dim=6, hidden_dim=10).double()
        z = torch.rand(1, 3, 8, dtype=torch.float64) * 2 - 1
        w = torch.rand(1, 3, 8, dtype=torch.float64)
        _check(lambda z: (block(z) * w).sum(), [z])

        names = [n for n, _ in block.named_parameters()]
        params = [p.detach().clone() for _, p in block.named_parameters()]

        def loss(*ps):
            state = dict(zip(names, ps))
            return (torch.func.functional_call(block, state, (z,)) * w).sum()

        _check(loss, params)


@C3
@pytest.mark.parametrize("kind", ["ns_gan", "wgan"])
def test_adversarial_loss_gradients(kind):
    with timed(60):
        real = torch.randn(6, dtype=torch.float64)
        fake = torch.randn(6, dtype=torch.float64)
        _check(lambda r, f: adversarial_losses(kind, r, f)[0], [real, fake])
        _check(lambda r, f: adversarial_losses(kind, r, f)[1], [real, fake])


@C3
def test_gradient_penalty_gradients_through_two_layer_critic():
    with timed(60):
        torch.manual_seed(4)
        w1 = torch.randn(5, 6, dtype=torch.float64)
        w2 = torch.randn(1, 5, dtype=torch.float64)
        real = torch.rand(4, 6, dtype=torch.float64)
        fake = torch.rand(4, 6, dtype=torch.float64)
        eps = torch.rand(4, 1, dtype=torch.float64)

        def penalty(w1, w2, real, fake):
            critic = lambda x: (torch.tanh(x @ w1.t()) @ w2.t()).squeeze(1)  # noqa: E731
            return gradient_penalty(critic, real, fake, 10.0, epsilon=eps)

        _check(penalty, [w1, w2, real, fake])


# 4 -------------------------------------------------------------------------------------

C4 = pytest.mark.criterion(4, "spectral normalization")


@C4
def test_spectral_norm_top_singular_value_after_power_iteration():
    with timed(5.0):
        g = torch.Generator().manual_seed(4)
        worst = 0.0
        for _ in range(20):
            w = torch.randn(64, 32, generator=g, dtype=torch.float64)
            u = torch.randn(64, generator=g, dtype=torch.float64)
            w_sn, state, sigma = spectral_normalize(w, SpectralNormState(u / u.norm()), 50)
            top = np.linalg.svd(w_sn.numpy(), compute_uv=False)[0]
            worst = max(worst, abs(top - 1.0))
            assert state.n_iter == 50
        assert worst < 1e-2, worst


# 5 -------------------------------------------------------------------------------------

C5 = pytest.mark.criterion(5, "FID oracle")


@C5
def test_frechet_distance_matches_diagonal_closed_form():
    with timed(1.0):
        rng = np.random.default_rng(5)
        for d in (1, 4, 32):
            mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
            var_a, var_b = rng.uniform(0.1, 3, size=d), rng.uniform(0.1, 3, size=d)
            got = frechet_distance(EmbeddingStats(mu_a, np.diag(var_a), 100), EmbeddingStats(mu_b, np.diag(var_b), 100))
            assert abs(got - diagonal_frechet(mu_a, var_a, mu_b, var_b)) < 1e-6


@C5
def test_frechet_self_distance_is_zero():
    with timed(1.0):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(500, 16))
        a = EmbeddingStats(x.mean(0), np.cov(x, rowvar=False), 500)
        assert abs(frechet_distance(a, a)) < 1e-6


# 6 -------------------------------------------------------------------------------------

C6 = pytest.mark.criterion(6, "segmentation oracles")


@C6
def test_matched_loss_equals_exhaustive_enumeration():
    with timed(10.0):
        g = torch.Generator().manual_seed(6)
        logits = torch.randn(3, 4, 8, 8, generator=g, dtype=torch.float64)
        target = torch.randint(0, 4, (3, 8, 8), generator=g)
        ignore = torch.rand(3, 8, 8, generator=g) < 0.1
        result = permutation_matched_loss(logits, target, ignore)
        ref, perms = brute_force_matched_ce(logits, target, ignore)
        assert abs(float(result.loss) - ref) <= 1e-12 * max(1.0, abs(ref))
        assert result.permutations == perms


@C6
def test_ari_identical_maps():
    with timed(10.0):
        labels = np.random.default_rng(0).integers(0, 4, size=(64, 64))
        assert ari_score(labels, labels) == pytest.approx(1.0, abs=1e-12)


@C6
def test_ari_is_invariant_to_label_renaming():
    with timed(10.0):
        rng = np.random.default_rng(1)
        truth = rng.integers(0, 4, size=(64, 64))
        pred = np.where(rng.random((64, 64)) < 0.8, truth, rng.integers(0, 4, size=(64, 64)))
        base = ari_score(pred, truth)
        for perm in itertools.permutations(range(4)):
            renamed = np.asarray(perm)[pred]
            assert ari_score(renamed, truth) == pytest.approx(base, abs=1e-12)
        assert ari_score(np.asarray([3, 2, 1, 0])[truth], truth) == pytest.approx(1.0, abs=1e-12)
        assert base == pytest.approx(adjusted_rand_score(truth.ravel(), pred.ravel()), abs=1e-12)


@C6
def test_ari_of_random_predictions_is_near_zero():
    with timed(10.0):
        rng = np.random.default_rng(2)
        truth = np.repeat(np.arange(4), 2500).reshape(100, 100)  # structured truth, 10^4 pixels
        pred = rng.integers(0, 3, size=(100, 100))
        assert abs(ari_score(pred, truth)) < 0.05


# 7 -------------------------------------------------------------------------------------

C7 = pytest.mark.criterion(7, "structural invariances")


@C7
def test_independent_components_do_not_interact():
    with timed(10.0):
        gen = StructuredGenerator(tiny_model(k=4)).eval()
        z = sample_latents(gen.cfg, 3, torch.Generator().manual_seed(7))
        with torch.no_grad():
            base = gen(z).colors
            for j in range(4):
                moved = gen(z.replace_component(j, torch.rand(3, 64) * 2 - 1)).colors
                for i in range(4):
                    if i != j:
                        assert torch.equal(moved[:, i], base[:, i])
                assert not torch.equal(moved[:, j], base[:, j])


@C7
def test_identical_latents_give_identical_components():
    with timed(10.0):
        gen = StructuredGenerator(tiny_model(k=3)).eval()
        z = sample_latents(gen.cfg, 2, torch.Generator().manual_seed(8))
        z.objects[:, 2] = z.objects[:, 0]
        with torch.no_grad():
            colors = gen(z).colors
        assert torch.equal(colors[:, 0], colors[:, 2])


@C7
def test_empty_relational_stage_is_identity():
    with timed(10.0):
        stage = RelationalStage(RelationalConfig(n_blocks=0), latent_dim=64)
        z, bg = torch.rand(2, 3, 64), torch.rand(2, 64)
        out, out_bg = stage(z, bg)
        assert torch.equal(out, z) and torch.equal(out_bg, bg)
        assert sum(p.numel() for p in stage.parameters()) == 0


# 8 -------------------------------------------------------------------------------------

C8 = pytest.mark.criterion(8, "grid fidelity")


@C8
def test_baseline_grid_has_48_configurations():
    with timed(1.0):
        cells = enumerate_grid(baseline_grid())
        assert len(cells) == 48
        assert len({c.name for c in cells}) == 48
        assert all(c.tag == "GAN" for c in cells)


@C8
def test_structured_grid_has_42_configurations():
    with timed(1.0):
        cells = enumerate_grid(structured_grid())
        assert len(cells) == 42
        assert len({c.name for c in cells}) == 42


# 9 -------------------------------------------------------------------------------------

C9 = pytest.mark.criterion(9, "desk-scale end-to-end (extended)")


@C9
@pytest.mark.extended
def test_desk_scale_training_improves_fid_and_segments_real_scenes(tmp_path):
    """3-GAN ind. on Independent MM at 64x64, batch 64, 50k steps, built-in embedder.

    Digits come from the MNIST files named by ``COMPGAN_MNIST`` when set,
    otherwise from the bundled stand-in corpus.
    """
    from compgan.datasets import DigitCorpus, SceneSpec, build
    from compgan.evaluation import train_crop_embedder
    from compgan.models import ModelConfig
    from compgan.segmentation import SegmenterTrainConfig, evaluate_segmenter, generator_pairs, train_segmenter
    from compgan.training import Trainer, load_generator, preset, read_metrics

    source = os.environ.get("COMPGAN_MNIST")
    digits = DigitCorpus.from_path(source) if source else DigitCorpus.bundled()
    bundle = build(SceneSpec("independent_mm", seed=0), 60_000, digits)
    embedder = train_crop_embedder(bundle)
    model_cfg = ModelConfig(k=3)
    improved, aris = 0, []
    for seed in range(5):
        out = tmp_path / f"seed{seed}"
        trainer = Trainer(model_cfg, preset("desk", seed=seed), bundle, out_dir=out, embedder=embedder)
        for _ in trainer.run():
            pass
        fid = {r.step: r.fid for r in read_metrics(out / "metrics.jsonl") if r.fid is not None}
        improved += fid[50_000] < fid[1_000]
        if seed == 0:
            gen = load_generator(out / "checkpoints" / "ckpt_00050000.pt")
            seg, _ = train_segmenter(generator_pairs(gen), 3, SegmenterTrainConfig(seed=seed))
            aris.append(evaluate_segmenter(seg, bundle, split="test", limit=1000).mean)
    assert improved >= 4, f"FID improved for {improved}/5 seeds"
    assert aris[0] >= 0.5, f"segmenter ARI {aris[0]:.3f}"
