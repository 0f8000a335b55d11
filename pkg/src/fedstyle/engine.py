"""Federated orchestration: client sampling, per-method local update and
training, sample-count-weighted aggregation, and the round loop.

Methods: fedavg, fedper, fedrep, fedprox, apfl, ditto, fedstyle. The server
always aggregates the content set (encoder+projector) of the sampled
clients; what a client adopts from the global model and which auxiliary
copies it keeps are method-specific (see ``local_update``).

Determinism: every stochastic choice draws from a generator keyed by
(seed, stream, round, client), so serial and threaded schedules agree and
reruns are byte-identical.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datasets, losses, models
from .config import ExperimentConfig

METRICS_SCHEMA_VERSION = 1

# seed-stream tags
_INIT, _SAMPLE, _CLIENT, _STYLE, _PROBE = 11, 12, 13, 14, 15


def stream_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return datasets.rng_from(seed, stream, *keys)


def client_rng(seed: int, round_no: int, client_id: int) -> np.random.Generator:
    return stream_rng(seed, _CLIENT, round_no, client_id)


def style_rng(seed: int, client_id: int) -> np.random.Generator:
    return stream_rng(seed, _STYLE, client_id)


def probe_rng(seed: int, *keys: int) -> np.random.Generator:
    return stream_rng(seed, _PROBE, *keys)


class RoundAbort(RuntimeError):
    """A client hit a numeric fault; the round cannot be trusted."""


@dataclass
class ClientState:
    client_id: int
    shard: datasets.DatasetShard
    content: models.ParamSet                       # encoder + projector
    global_copy: models.ParamSet | None = None     # fedprox/apfl/ditto snapshot
    style: models.ParamSet | None = None           # fedstyle
    generator: models.ParamSet | None = None       # fedstyle
    predictor: models.ParamSet | None = None       # simsiam
    h_style: np.ndarray | None = field(default=None, repr=False)   # frozen f_ws(x)
    h_sobel: np.ndarray | None = field(default=None, repr=False)   # frozen f_ws(Sobel(x))


@dataclass
class RoundReport:
    round: int
    method: str
    seed: int
    selected: list[int]
    client_losses: dict[int, float]
    wall_time_s: float

    def metrics_json(self) -> str:
        # deterministic fields only; wall time goes to the timings log
        return json.dumps({
            "schema_version": METRICS_SCHEMA_VERSION,
            "round": self.round,
            "method": self.method,
            "seed": self.seed,
            "selected": self.selected,
            "client_losses": {str(k): self.client_losses[k] for k in sorted(self.client_losses)},
        }, sort_keys=True)

    def timing_json(self) -> str:
        return json.dumps({"round": self.round, "wall_time_s": self.wall_time_s})


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    global_params: models.ParamSet
    clients: list[ClientState]
    reports: list[RoundReport]
    style_datasets: list[datasets.StyleDataset]


# ---------------------------------------------------------------------------
# protocol pieces


def sample_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of floor(fraction * n) clients."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("sample_clients: fraction must be in (0, 1]")
    k = int(fraction * n_clients)
    if k < 1:
        raise ValueError(f"sample_clients: fraction {fraction} selects zero of {n_clients} clients")
    return sorted(int(c) for c in rng.choice(n_clients, size=k, replace=False))


def aggregate(param_sets: list[models.ParamSet], counts: list[int]) -> models.ParamSet:
    """Sample-count-weighted mean of content sets, reduced left to right."""
    if not param_sets:
        raise ValueError("aggregate: empty parameter list")
    if len(param_sets) != len(counts):
        raise ValueError("aggregate: need one sample count per parameter set")
    total = float(np.sum(counts))
    if total <= 0:
        raise ValueError("aggregate: total sample count must be positive")
    template = param_sets[0]
    names = template.names
    acc = np.zeros_like(template.flatten())
    for ps, cnt in zip(param_sets, counts):
        if ps.names != names:
            raise ValueError("aggregate: parameter sets disagree on tensor names")
        acc = acc + (cnt / total) * ps.flatten()
    return template.unflatten(acc)


def local_update(method: str, global_params: models.ParamSet, client: ClientState) -> None:
    """Adopt the round-start global model the way the method prescribes."""
    if method in ("fedavg", "fedstyle"):
        client.content.copy_from(global_params)
    elif method in ("fedper", "fedrep"):
        client.content.copy_from(global_params, prefix="enc.")
    elif method in ("fedprox", "apfl", "ditto"):
        client.global_copy = global_params.clone()
    else:
        raise ValueError(f"local_update: unknown method {method!r}")


# ---------------------------------------------------------------------------
# local training


def _embed(content: models.ParamSet, pixels, training: bool = True) -> tuple[ad.Tensor, ad.Tensor]:
    h = models.encoder_forward(content, pixels, training=training)
    return h, models.projector_forward(content, h)


def _predictor_fn(client: ClientState):
    if client.predictor is None:
        return None
    return lambda z: models.predictor_forward(client.predictor, z)


def iter_batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch index arrays; singleton tails are dropped
    (batchnorm and the contrastive losses need at least two rows)."""
    order = idx[rng.permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _proximal(content: models.ParamSet, ref: models.ParamSet, mu: float) -> ad.Tensor:
    """(mu/2) * ||w - w_ref||^2 over trainable tensors."""
    total = None
    for name, t in content.items():
        if not t.requires_grad:
            continue
        d = ad.sub(t, ad.constant(ref[name].data))
        sq = ad.sum(ad.mul(d, d))
        total = sq if total is None else ad.add(total, sq)
    return ad.mul_scalar(total, mu / 2.0)


def _step(update: list[ad.Tensor], also_clear: list[ad.Tensor], lr: float) -> None:
    ad.sgd_step(update, lr)
    ad.zero_grads(also_clear)


def _train_plain(client: ClientState, cfg: ExperimentConfig,
                 rng: np.random.Generator) -> list[float]:
    """Two-view contrastive epochs on the client shard (fedavg/fedper path)."""
    content = client.content
    pred_fn = _predictor_fn(client)
    px = client.shard.pixels
    step_losses = []
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            v1 = datasets.augment_batch(px[idx], rng)
            v2 = datasets.augment_batch(px[idx], rng)
            with ad.record():
                _, z1 = _embed(content, v1)
                _, z2 = _embed(content, v2)
                loss = losses.unsup_loss(cfg.variant, z1, z2, cfg.tau, pred_fn)
                ad.backward(loss)
            update = content.trainable()
            if client.predictor is not None:
                update = update + client.predictor.trainable()
            _step(update, [], cfg.lr)
            step_losses.append(float(loss.data))
    return step_losses


def _train_fedrep(client: ClientState, cfg: ExperimentConfig,
                  rng: np.random.Generator) -> list[float]:
    """Projector-only epochs with the encoder frozen (eval mode), then
    encoder-only epochs with the projector frozen."""
    content = client.content
    pred_fn = _predictor_fn(client)
    px = client.shard.pixels
    step_losses = []

    def phase(train_prefix: str, encoder_training: bool):
        for _ in range(cfg.local_epochs):
            for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
                v1 = datasets.augment_batch(px[idx], rng)
                v2 = datasets.augment_batch(px[idx], rng)
                with ad.record():
                    h1 = models.encoder_forward(content, v1, training=encoder_training)
                    h2 = models.encoder_forward(content, v2, training=encoder_training)
                    z1 = models.projector_forward(content, h1)
                    z2 = models.projector_forward(content, h2)
                    loss = losses.unsup_loss(cfg.variant, z1, z2, cfg.tau, pred_fn)
                    ad.backward(loss)
                update = content.trainable(prefix=train_prefix)
                clear = content.trainable()
                if client.predictor is not None:
                    if train_prefix == "proj.":  # heads train together
                        update = update + client.predictor.trainable()
                    clear = clear + client.predictor.trainable()
                _step(update, clear, cfg.lr)
                step_losses.append(float(loss.data))

    phase("proj.", encoder_training=False)
    phase("enc.", encoder_training=True)
    return step_losses


def _train_fedprox(client: ClientState, cfg: ExperimentConfig,
                   rng: np.random.Generator) -> list[float]:
    content = client.content
    pred_fn = _predictor_fn(client)
    px = client.shard.pixels
    step_losses = []
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            v1 = datasets.augment_batch(px[idx], rng)
            v2 = datasets.augment_batch(px[idx], rng)
            with ad.record():
                _, z1 = _embed(content, v1)
                _, z2 = _embed(content, v2)
                loss = losses.unsup_loss(cfg.variant, z1, z2, cfg.tau, pred_fn)
                if cfg.mu_prox > 0:
                    loss = ad.add(loss, _proximal(content, client.global_copy, cfg.mu_prox))
                ad.backward(loss)
            update = content.trainable()
            if client.predictor is not None:
                update = update + client.predictor.trainable()
            _step(update, [], cfg.lr)
            step_losses.append(float(loss.data))
    return step_losses


def _train_apfl(client: ClientState, cfg: ExperimentConfig,
                rng: np.random.Generator) -> list[float]:
    """Per batch: train the global copy on its own views, then the personal
    model on the alpha-mixture with the global branch detached."""
    content, glob = client.content, client.global_copy
    pred_fn = _predictor_fn(client)
    a = cfg.apfl_alpha
    px = client.shard.pixels
    step_losses = []
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            v1 = datasets.augment_batch(px[idx], rng)
            v2 = datasets.augment_batch(px[idx], rng)
            with ad.record():
                _, z1g = _embed(glob, v1)
                _, z2g = _embed(glob, v2)
                _, z1 = _embed(content, v1)
                _, z2 = _embed(content, v2)
                loss_g = losses.unsup_loss(cfg.variant, z1g, z2g, cfg.tau, pred_fn)
                second1 = z2 if cfg.apfl_literal_mixing else z1
                zh1 = ad.add(ad.mul_scalar(ad.detach(z1g), a), ad.mul_scalar(second1, 1.0 - a))
                zh2 = ad.add(ad.mul_scalar(ad.detach(z2g), a), ad.mul_scalar(z2, 1.0 - a))
                loss_l = losses.unsup_loss(cfg.variant, zh1, zh2, cfg.tau, pred_fn)
            pred_list = client.predictor.trainable() if client.predictor else []
            ad.backward(loss_g)  # global copy first, as the appendix orders it
            _step(glob.trainable(), pred_list + content.trainable(), cfg.lr)
            ad.backward(loss_l)  # mixture gradient skips the detached branch
            _step(content.trainable() + pred_list, glob.trainable(), cfg.lr)
            step_losses.append(float(loss_l.data))
    return step_losses


def _train_ditto(client: ClientState, cfg: ExperimentConfig,
                 rng: np.random.Generator) -> list[float]:
    """Phase 1 trains the stored global copy on the plain loss; phase 2
    trains the personal model with a proximal pull toward that copy."""
    content, glob = client.content, client.global_copy
    pred_fn = _predictor_fn(client)
    px = client.shard.pixels
    step_losses = []
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            v1 = datasets.augment_batch(px[idx], rng)
            v2 = datasets.augment_batch(px[idx], rng)
            with ad.record():
                _, z1 = _embed(glob, v1)
                _, z2 = _embed(glob, v2)
                loss = losses.unsup_loss(cfg.variant, z1, z2, cfg.tau, pred_fn)
                ad.backward(loss)
            update = glob.trainable()
            if client.predictor is not None:
                update = update + client.predictor.trainable()
            _step(update, [], cfg.lr)
            step_losses.append(float(loss.data))
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(client.shard.train_idx, cfg.batch_size, rng):
            v1 = datasets.augment_batch(px[idx], rng)
            v2 = datasets.augment_batch(px[idx], rng)
            with ad.record():
                _, z1 = _embed(content, v1)
                _, z2 = _embed(content, v2)
                loss = losses.unsup_loss(cfg.variant, z1, z2, cfg.tau, pred_fn)
                if cfg.mu_ditto > 0:
                    loss = ad.add(loss, _proximal(content, glob, cfg.mu_ditto))
                ad.backward(loss)
            update = content.trainable()
            if client.predictor is not None:
                update = update + client.predictor.trainable()
            _step(update, [], cfg.lr)
            step_losses.append(float(loss.data))
    return step_losses


def local_training(method: str, client: ClientState, cfg: ExperimentConfig,
                   rng: np.random.Generator) -> float:
    """Run the method's local optimization; returns the mean step loss."""
    from . import style  # deferred: style builds on this module's helpers

    if method in ("fedavg", "fedper"):
        step_losses = _train_plain(client, cfg, rng)
    elif method == "fedrep":
        step_losses = _train_fedrep(client, cfg, rng)
    elif method == "fedprox":
        step_losses = _train_fedprox(client, cfg, rng)
    elif method == "apfl":
        step_losses = _train_apfl(client, cfg, rng)
    elif method == "ditto":
        step_losses = _train_ditto(client, cfg, rng)
    elif method == "fedstyle":
        if cfg.lam == 0.0:
            # Eq-3 degenerate case: exactly the plain path, same rng draws
            step_losses = _train_plain(client, cfg, rng)
        else:
            step_losses = style.style_infused_training(client, cfg, rng)
    else:
        raise ValueError(f"local_training: unknown method {method!r}")
    if not step_losses:
        raise ValueError(f"local_training: client {client.client_id} produced no usable batches")
    return float(np.mean(step_losses))


# ---------------------------------------------------------------------------
# run setup and loop


def build_style_datasets(cfg: ExperimentConfig, seed: int) -> list[datasets.StyleDataset]:
    if cfg.idx_images:
        return [
            datasets.load_idx_dataset(img, lab, style_id=s, seed=seed, train_frac=cfg.train_frac)
            for s, (img, lab) in enumerate(zip(cfg.idx_images, cfg.idx_labels))
        ]
    return datasets.generate_styled_dataset(
        cfg.num_classes, cfg.num_styles, cfg.per_class, cfg.image_size,
        seed=seed, train_frac=cfg.train_frac)


def prepare(cfg: ExperimentConfig, seed: int) -> tuple[list[datasets.StyleDataset],
                                                       models.ParamSet, list[ClientState]]:
    """Data, shards, initial global model and client states for one seed."""
    cfg.validate()
    style_data = build_style_datasets(cfg, seed)
    spec = datasets.PartitionSpec(
        clients_per_style=cfg.clients_per_style,
        samples_per_client=cfg.samples_per_client,
        beta=cfg.beta, seed=seed)
    shards = datasets.partition_styled(style_data, spec)

    in_dim = int(np.prod(shards[0].pixels.shape[1:]))
    enc_hidden = tuple(cfg.encoder_hidden)
    global_params = models.init_content(
        stream_rng(seed, _INIT, 0), in_dim, enc_hidden, cfg.feature_dim,
        cfg.hidden_dim, cfg.embed_dim, batchnorm=cfg.batchnorm)

    predictor_tmpl = None
    if cfg.variant == "simsiam":
        predictor_tmpl = models.init_predictor(stream_rng(seed, _INIT, 1),
                                               cfg.embed_dim, cfg.hidden_dim)
    style_tmpl = generator_tmpl = None
    if cfg.method == "fedstyle":
        style_tmpl = models.init_style(stream_rng(seed, _INIT, 2), in_dim, enc_hidden,
                                       cfg.feature_dim, cfg.hidden_dim, cfg.embed_dim,
                                       batchnorm=cfg.batchnorm)
        generator_tmpl = models.init_generator(stream_rng(seed, _INIT, 3),
                                               cfg.feature_dim, cfg.hidden_dim)

    clients = []
    for shard in shards:
        clients.append(ClientState(
            client_id=shard.client_id,
            shard=shard,
            content=global_params.clone(),
            predictor=predictor_tmpl.clone() if predictor_tmpl else None,
            style=style_tmpl.clone() if style_tmpl else None,
            generator=generator_tmpl.clone() if generator_tmpl else None,
        ))
    return style_data, global_params, clients


def run_round(cfg: ExperimentConfig, seed: int, round_no: int,
              global_params: models.ParamSet, clients: list[ClientState],
              threads: int = 1) -> tuple[models.ParamSet, RoundReport]:
    """One communication round: sample, update, train, aggregate."""
    t0 = time.perf_counter()
    selected = sample_clients(len(clients), cfg.sample_fraction,
                              stream_rng(seed, _SAMPLE, round_no))

    def train_one(cid: int) -> tuple[int, float]:
        client = clients[cid]
        local_update(cfg.method, global_params, client)
        try:
            loss = local_training(cfg.method, client, cfg,
                                  client_rng(seed, round_no, cid))
        except FloatingPointError as e:
            raise RoundAbort(f"round {round_no}, client {cid}: {e}") from e
        return cid, loss

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(train_one, selected))
    else:
        results = dict(train_one(cid) for cid in selected)

    ordered = sorted(selected)
    new_global = aggregate([clients[cid].content for cid in ordered],
                           [len(clients[cid].shard.train_idx) for cid in ordered])
    report = RoundReport(
        round=round_no, method=cfg.method, seed=seed, selected=ordered,
        client_losses={cid: results[cid] for cid in ordered},
        wall_time_s=time.perf_counter() - t0)
    return new_global, report


def run(cfg: ExperimentConfig, seed: int,
        out_dir: str | Path | None = None) -> RunResult:
    """Full protocol for one seed; optionally persists metrics/checkpoints."""
    from . import style

    style_data, global_params, clients = prepare(cfg, seed)
    threads = cfg.threads if cfg.threads > 0 else (_available_cores())

    if cfg.method == "fedstyle" and cfg.style_epochs > 0:
        for client in clients:  # one-time extraction for every client
            style.extract_style(client, cfg, style_rng(seed, client.client_id))
    if cfg.method == "fedstyle":
        for client in clients:
            style.freeze_and_cache_style(client, cfg)

    reports = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        from . import config as config_mod
        (out / "config.toml").write_text(config_mod.serialize(cfg))

    for round_no in range(1, cfg.rounds + 1):
        global_params, report = run_round(cfg, seed, round_no, global_params,
                                          clients, threads=threads)
        reports.append(report)
        if out is not None and cfg.checkpoint_every > 0 and round_no % cfg.checkpoint_every == 0:
            models.save_params(global_params, out / "checkpoints" / f"global_round_{round_no:04d}")

    if out is not None:
        (out / "metrics.jsonl").write_text(
            "".join(r.metrics_json() + "\n" for r in reports))
        (out / "timings.jsonl").write_text(
            "".join(r.timing_json() + "\n" for r in reports))
        ckpt = out / "checkpoints"
        models.save_params(global_params, ckpt / "global")
        for client in clients:
            base = ckpt / f"client_{client.client_id:03d}"
            models.save_params(client.content, base / "content")
            for name in ("global_copy", "style", "generator", "predictor"):
                ps = getattr(client, name)
                if ps is not None:
                    models.save_params(ps, base / name)

    return RunResult(cfg, seed, global_params, clients, reports, style_data)


def _available_cores() -> int:
    import os
    return os.cpu_count() or 1
