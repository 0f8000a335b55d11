import numpy as np
import pytest

import fedstyle.autodiff as ad
from fedstyle import engine, evaluation, models, style
from fedstyle.config import ExperimentConfig


def fedstyle_config(**overrides):
    base = dict(method="fedstyle", variant="simclr", num_classes=3, num_styles=2,
                per_class=30, image_size=10, clients_per_style=1,
                samples_per_client=40, rounds=1, local_epochs=1, style_epochs=2,
                batch_size=14, encoder_hidden=[16], feature_dim=8, hidden_dim=8,
                embed_dim=6, lam=0.5, seeds=[4], threads=1, probe_epochs=10)
    base.update(overrides)
    return ExperimentConfig(**base)


def prepared_client(cfg, seed=4, cid=0):
    _, g, clients = engine.prepare(cfg, seed)
    return g, clients[cid]


def test_zero_extraction_epochs_leaves_parameters_at_init():
    cfg = fedstyle_config(style_epochs=0)
    _, client = prepared_client(cfg)
    before = client.style.flatten().tobytes()
    losses = style.extract_style(client, cfg, engine.style_rng(4, 0))
    assert losses == []
    assert client.style.flatten().tobytes() == before


def test_extraction_improves_separation_three_seeds():
    for seed in (1, 2, 3):
        cfg = fedstyle_config(style_epochs=4)
        _, client = prepared_client(cfg, seed=seed)
        before = style.style_separation(client, cfg)
        style.extract_style(client, cfg, engine.style_rng(seed, 0))
        after = style.style_separation(client, cfg)
        assert after > before


def test_extraction_deterministic_given_seed():
    cfg = fedstyle_config()
    _, a = prepared_client(cfg)
    _, b = prepared_client(cfg)
    style.extract_style(a, cfg, engine.style_rng(4, 0))
    style.extract_style(b, cfg, engine.style_rng(4, 0))
    assert a.style.flatten().tobytes() == b.style.flatten().tobytes()


def test_freeze_and_cache_blocks_style_training():
    cfg = fedstyle_config()
    _, client = prepared_client(cfg)
    style.extract_style(client, cfg, engine.style_rng(4, 0))
    style.freeze_and_cache_style(client, cfg)
    assert client.h_style.shape == (len(client.shard), cfg.feature_dim)
    assert all(not t.requires_grad for t in client.style.tensors())


def test_style_model_bitwise_constant_through_rounds():
    cfg = fedstyle_config(rounds=2)
    result = engine.run(cfg, seed=4)
    snapshot = [c.style.flatten().tobytes() for c in result.clients]
    more = engine.run_round(cfg, 4, 3, result.global_params, result.clients, threads=1)
    assert [c.style.flatten().tobytes() for c in result.clients] == snapshot


def test_infused_training_requires_cache():
    cfg = fedstyle_config()
    _, client = prepared_client(cfg)
    with pytest.raises(ValueError, match="cache"):
        style.style_infused_training(client, cfg, engine.style_rng(4, 0))


def test_lambda_zero_matches_fedavg_step_bitwise():
    cfg_fs = fedstyle_config(lam=0.0, style_epochs=0, rounds=3)
    cfg_fa = ExperimentConfig(**{**cfg_fs.to_dict(), "method": "fedavg"})
    a = engine.run(cfg_fs, seed=4)
    b = engine.run(cfg_fa, seed=4)
    assert a.global_params.flatten().tobytes() == b.global_params.flatten().tobytes()
    assert [r.client_losses for r in a.reports] == [r.client_losses for r in b.reports]


def test_infused_loss_at_least_clean_loss_at_step_zero():
    # both terms of the total are nonnegative for the simclr variant
    cfg = fedstyle_config(lam=0.5)
    result = engine.run(cfg, seed=4)
    cfg0 = fedstyle_config(lam=0.0)
    base = engine.run(cfg0, seed=4)
    assert all(result.reports[0].client_losses[c] >= base.reports[0].client_losses[c] - 1e-9
               for c in result.reports[0].client_losses)


def test_gradient_reaches_generator():
    cfg = fedstyle_config()
    _, client = prepared_client(cfg)
    style.extract_style(client, cfg, engine.style_rng(4, 0))
    style.freeze_and_cache_style(client, cfg)
    before = client.generator.flatten().tobytes()
    style.style_infused_training(client, cfg, engine.client_rng(4, 1, 0))
    assert client.generator.flatten().tobytes() != before


def test_freeze_generator_pretrain_flag():
    cfg = fedstyle_config(freeze_generator_pretrain=True)
    _, client = prepared_client(cfg)
    style.extract_style(client, cfg, engine.style_rng(4, 0))
    style.freeze_and_cache_style(client, cfg)
    before = client.generator.flatten().tobytes()
    style.style_infused_training(client, cfg, engine.client_rng(4, 1, 0))
    assert client.generator.flatten().tobytes() == before


def test_personalized_feature_zero_generator_is_identity():
    gen = models.init_generator(np.random.default_rng(0), feature_dim=6, hidden=5)
    for _, t in gen.items():
        t.data = np.zeros_like(t.data)
    h_c = np.random.default_rng(1).standard_normal((4, 6))
    h_s = np.random.default_rng(2).standard_normal((4, 6))
    out = style.personalized_feature(h_c, h_s, gen)
    assert np.array_equal(out.data, h_c)


def test_personalized_feature_residual_linearity():
    gen = models.init_generator(np.random.default_rng(3), feature_dim=5, hidden=7)
    h_c = np.random.default_rng(4).standard_normal((3, 5))
    h_s = np.random.default_rng(5).standard_normal((3, 5))
    g_out = models.generator_forward(gen, h_c, h_s).data
    doubled = gen.clone()
    doubled["gen.out.w"].data = doubled["gen.out.w"].data * 2.0
    doubled["gen.out.b"].data = doubled["gen.out.b"].data * 2.0
    out = style.personalized_feature(h_c, h_s, doubled)
    assert np.allclose(out.data, h_c + 2.0 * g_out, atol=1e-12)


def test_personalized_feature_shape():
    gen = models.init_generator(np.random.default_rng(6), feature_dim=4, hidden=4)
    h = np.zeros((7, 4))
    assert style.personalized_feature(h, h, gen).shape == (7, 4)


def test_generator_output_variance_metric():
    gen = models.init_generator(np.random.default_rng(7), feature_dim=4, hidden=4)
    h = np.random.default_rng(8).standard_normal((10, 4))
    v = style.generator_output_variance(gen, h, h)
    assert v > 0
    for _, t in gen.items():
        t.data = np.zeros_like(t.data)
    assert style.generator_output_variance(gen, h, h) == 0.0


def test_simsiam_variant_runs_through_infusion():
    cfg = fedstyle_config(variant="simsiam", rounds=1)
    result = engine.run(cfg, seed=4)
    assert all(np.isfinite(list(r.client_losses.values())).all() for r in result.reports)
