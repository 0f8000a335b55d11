"""Style extraction, style-infused contrastive training, and the stylized
personalization feature.

Extraction contrasts each client's images against their Sobel-filtered
versions with the supervised style InfoNCE: the Sobel domain is the shared
reference style, so what the style encoder isolates is the client's own
appearance. After extraction the style model is frozen for good and its
features are cached per image; infusion then trains content encoder,
content projector and generator on the clean plus lambda-weighted infused
contrastive loss (view 1 paired with the local style feature, view 2 with
the Sobel feature).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import datasets, losses, models
from .config import ExperimentConfig
from .engine import ClientState, _embed, _predictor_fn, _step, iter_batches

SOBEL_STYLE_ID = -1  # reserved label for the shared reference style

# The style loss sums (not averages) over anchors, so its gradients grow with
# batch size; at desk scale a plain 0.1 SGD step on it blows the projector
# up. Clipping the joint gradient norm keeps the loss verbatim while making
# extraction stable.
STYLE_GRAD_CLIP = 1.0


def extract_style(client: ClientState, cfg: ExperimentConfig,
                  rng: np.random.Generator) -> list[float]:
    """Train the client's style model for ``style_epochs`` epochs.

    Each minibatch is doubled with Sobel versions, so the 2B batch holds the
    two styles in equal number, as the style loss requires.
    """
    if client.style is None:
        raise ValueError("extract_style: client has no style model")
    px = client.shard.pixels
    sob = client.shard.sobel()
    step_losses = []
    for _ in range(cfg.style_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            batch = np.concatenate([px[idx], sob[idx]])
            labels = np.array([client.shard.style_id] * len(idx) +
                              [SOBEL_STYLE_ID] * len(idx))
            with ad.record():
                h = models.encoder_forward(client.style, batch, training=True)
                z = models.projector_forward(client.style, h)
                loss = losses.style_infonce(z, labels, cfg.tau)
                ad.backward(loss)
            ad.clip_grad_norm(client.style.trainable(), STYLE_GRAD_CLIP)
            _step(client.style.trainable(), [], cfg.lr)
            step_losses.append(float(loss.data))
    return step_losses


def freeze_and_cache_style(client: ClientState, cfg: ExperimentConfig) -> None:
    """Freeze the style model and precompute eval-mode style features for
    every shard image (they are constants from here on)."""
    if client.style is None:
        raise ValueError("freeze_and_cache_style: client has no style model")
    client.style.set_requires_grad(False)
    h_s = models.encoder_forward(client.style, client.shard.pixels, training=False)
    h_sob = models.encoder_forward(client.style, client.shard.sobel(), training=False)
    client.h_style = h_s.data
    client.h_sobel = h_sob.data


def style_infused_training(client: ClientState, cfg: ExperimentConfig,
                           rng: np.random.Generator) -> list[float]:
    """One local-training call of the infusion algorithm (lambda > 0).

    Updates content encoder, content projector and generator; the style
    model is frozen and consumed through the cached features.
    """
    if client.h_style is None or client.h_sobel is None:
        raise ValueError("style_infused_training: style features not cached "
                         "(run freeze_and_cache_style first)")
    content, gen = client.content, client.generator
    pred_fn = _predictor_fn(client)
    px = client.shard.pixels
    step_losses = []
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            v1 = datasets.augment_batch(px[idx], rng)
            v2 = datasets.augment_batch(px[idx], rng)
            h_s = ad.constant(client.h_style[idx])
            h_sob = ad.constant(client.h_sobel[idx])
            with ad.record():
                h1, z1 = _embed(content, v1)
                h2, z2 = _embed(content, v2)
                zi1 = models.projector_forward(content, models.generator_forward(gen, h1, h_s))
                zi2 = models.projector_forward(content, models.generator_forward(gen, h2, h_sob))
                loss = losses.fedstyle_total((z1, z2), (zi1, zi2), cfg.lam,
                                             cfg.variant, cfg.tau, pred_fn)
                ad.backward(loss)
            update = content.trainable()
            clear = []
            if cfg.freeze_generator_pretrain:
                clear = gen.trainable()  # literal reading: generator untouched here
            else:
                update = update + gen.trainable()
            if client.predictor is not None:
                update = update + client.predictor.trainable()
            _step(update, clear, cfg.lr)
            step_losses.append(float(loss.data))
    return step_losses


def personalized_feature(h_c, h_s, generator: models.ParamSet) -> ad.Tensor:
    """h = h_c + G(concat[h_c, h_s]): the stylized content feature."""
    h_c = h_c if isinstance(h_c, ad.Tensor) else ad.constant(h_c)
    h_s = h_s if isinstance(h_s, ad.Tensor) else ad.constant(h_s)
    return ad.add(h_c, models.generator_forward(generator, h_c, h_s))


def generator_output_variance(generator: models.ParamSet, h_c: np.ndarray,
                              h_s: np.ndarray) -> float:
    """Mean per-dimension variance of G outputs across inputs (the collapse
    metric: a degenerate generator maps everything near one point)."""
    out = models.generator_forward(generator, ad.constant(h_c), ad.constant(h_s))
    return float(out.data.var(axis=0).mean())


def style_separation(client: ClientState, cfg: ExperimentConfig) -> float:
    """Mean same-style minus cross-style cosine of the projected style
    embeddings, originals vs Sobel references."""
    if client.style is None:
        raise ValueError("style_separation: client has no style model")
    px = client.shard.pixels[client.shard.train_idx]
    sob = client.shard.sobel()[client.shard.train_idx]
    z_o = models.projector_forward(
        client.style, models.encoder_forward(client.style, px, training=False)).data
    z_s = models.projector_forward(
        client.style, models.encoder_forward(client.style, sob, training=False)).data
    z = np.concatenate([z_o, z_s])
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    n = len(z_o)
    sims = z @ z.T
    same = np.zeros((2 * n, 2 * n), dtype=bool)
    same[:n, :n] = True
    same[n:, n:] = True
    np.fill_diagonal(same, False)
    cross = ~same
    np.fill_diagonal(cross, False)
    return float(sims[same].mean() - sims[cross].mean())
