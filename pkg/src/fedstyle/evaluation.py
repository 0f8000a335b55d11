"""Linear-probe evaluation of generalization (global encoder per style) and
personalization (per-client features), plus embedding export.

Probes are softmax classifiers trained full-batch by SGD on frozen
features. The stylized personalization probe co-trains a clone of the
client's generator with the classifier; encoder and style model are never
touched by any probe (their parameters are read, not written). Top-1
accuracy is the exact argmax match ratio; argmax ties resolve to the lowest
class index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import engine, models, style
from .config import ExperimentConfig

CSV_HEADER = "method,variant,style,client,setting,accuracy,seed"


@dataclass
class ProbeResult:
    method: str
    variant: str
    style_id: int
    client_id: int | None  # None for generalization probes
    setting: str           # "Ho" or "He@<beta>"
    accuracy: float
    seed: int
    epochs: int

    def csv_row(self) -> str:
        client = "" if self.client_id is None else str(self.client_id)
        return (f"{self.method},{self.variant},{self.style_id},{client},"
                f"{self.setting},{self.accuracy!r},{self.seed}")


def setting_label(cfg: ExperimentConfig) -> str:
    return "Ho" if cfg.beta is None else f"He@{cfg.beta:g}"


def encode_features(content: models.ParamSet, pixels: np.ndarray) -> np.ndarray:
    """Eval-mode encoder output rows (the probe's frozen features)."""
    return models.encoder_forward(content, pixels, training=False).data


def softmax_xent(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy with a constant row-max shift for stability."""
    n, k = logits.shape
    m = ad.constant(logits.data.max(axis=1, keepdims=True))
    lse = ad.add(ad.log(ad.sum(ad.exp(ad.sub(logits, m)), axis=1)), ad.sum(m, axis=1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum(ad.mul(logits, ad.constant(onehot)), axis=1)
    return ad.mean(ad.sub(lse, picked))


def train_linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int,
                       epochs: int, lr: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch SGD softmax classifier on frozen features."""
    if len(np.unique(labels)) < 2:
        raise ValueError("train_linear_probe: need at least two classes in the labels")
    d = features.shape[1]
    w = ad.parameter(rng.normal(0.0, 0.01, size=(d, num_classes)))
    b = ad.parameter(np.zeros(num_classes))
    x = ad.constant(features)
    for _ in range(epochs):
        with ad.record():
            loss = softmax_xent(ad.add(ad.matmul(x, w), b), labels)
            ad.backward(loss)
        ad.sgd_step([w, b], lr)
    return w.data, b.data


def probe_accuracy(w: np.ndarray, b: np.ndarray, features: np.ndarray,
                   labels: np.ndarray) -> float:
    pred = np.argmax(features @ w + b, axis=1)
    return float(np.mean(pred == labels))


def eval_generalization(global_params: models.ParamSet,
                        style_datasets, cfg: ExperimentConfig,
                        seed: int) -> list[ProbeResult]:
    """One probe per style dataset on frozen global-encoder features."""
    setting = setting_label(cfg)
    out = []
    for ds in style_datasets:
        feats_train = encode_features(global_params, ds.pixels[ds.train_idx])
        feats_test = encode_features(global_params, ds.pixels[ds.test_idx])
        w, b = train_linear_probe(
            feats_train, ds.labels[ds.train_idx], ds.num_classes,
            cfg.probe_epochs, cfg.probe_lr, engine.probe_rng(seed, 0, ds.style_id))
        acc = probe_accuracy(w, b, feats_test, ds.labels[ds.test_idx])
        out.append(ProbeResult(cfg.method, cfg.variant, ds.style_id, None,
                               setting, acc, seed, cfg.probe_epochs))
    return out


def _client_style_features(client: engine.ClientState) -> np.ndarray:
    if client.h_style is not None:
        return client.h_style
    if client.style is None:
        raise ValueError("personalization: client has no style model")
    return encode_features(client.style, client.shard.pixels)


def _train_probe_with_generator(h_c: np.ndarray, h_s: np.ndarray, labels: np.ndarray,
                                generator: models.ParamSet, num_classes: int,
                                epochs: int, lr: float, rng: np.random.Generator):
    """Jointly optimize classifier and generator on the stylized feature
    h_c + G(concat[h_c, h_s]) (content/style features stay constant)."""
    d = h_c.shape[1]
    w = ad.parameter(rng.normal(0.0, 0.01, size=(d, num_classes)))
    b = ad.parameter(np.zeros(num_classes))
    hc_t, hs_t = ad.constant(h_c), ad.constant(h_s)
    for _ in range(epochs):
        with ad.record():
            h = style.personalized_feature(hc_t, hs_t, generator)
            loss = softmax_xent(ad.add(ad.matmul(h, w), b), labels)
            ad.backward(loss)
        ad.sgd_step([w, b] + generator.trainable(), lr)
    return w.data, b.data


def eval_personalization(client: engine.ClientState, cfg: ExperimentConfig,
                         seed: int, stylized: bool | None = None) -> ProbeResult:
    """Probe a client's local features on its own train/test split.

    fedstyle with the stylized feature enabled co-trains a clone of the
    client generator with the probe; every other path is a plain linear
    probe on frozen encoder features.
    """
    shard = client.shard
    labels = shard.labels
    num_classes = int(labels.max()) + 1
    rng = engine.probe_rng(seed, 1, client.client_id)
    use_stylized = cfg.personalization_stylized if stylized is None else stylized
    h_c = encode_features(client.content, shard.pixels)

    if cfg.method == "fedstyle" and use_stylized:
        h_s = _client_style_features(client)
        gen = client.generator.clone()  # probe-local: evaluation stays idempotent
        w, b = _train_probe_with_generator(
            h_c[shard.train_idx], h_s[shard.train_idx], labels[shard.train_idx],
            gen, num_classes, cfg.probe_epochs, cfg.probe_lr, rng)
        h_test = style.personalized_feature(
            ad.constant(h_c[shard.test_idx]), ad.constant(h_s[shard.test_idx]), gen).data
        acc = probe_accuracy(w, b, h_test, labels[shard.test_idx])
    else:
        w, b = train_linear_probe(
            h_c[shard.train_idx], labels[shard.train_idx], num_classes,
            cfg.probe_epochs, cfg.probe_lr, rng)
        acc = probe_accuracy(w, b, h_c[shard.test_idx], labels[shard.test_idx])

    return ProbeResult(cfg.method, cfg.variant, shard.style_id, client.client_id,
                       setting_label(cfg), acc, seed, cfg.probe_epochs)


# ---------------------------------------------------------------------------
# embedding export (for external projection tools)


def export_embeddings(clients: list[engine.ClientState], which: str,
                      out_dir: str | Path) -> Path:
    """Write one matrix of per-sample features plus ids for all clients.

    ``which`` selects content features (h_c) or style features (h_s). The
    blob is row-major little-endian f64; the manifest carries row ids.
    """
    if which not in ("h_c", "h_s"):
        raise ValueError(f"export_embeddings: which must be 'h_c' or 'h_s', got {which!r}")
    rows, client_ids, style_ids, labels = [], [], [], []
    for client in clients:
        if which == "h_c":
            feats = encode_features(client.content, client.shard.pixels)
        else:
            feats = _client_style_features(client)
        rows.append(feats)
        n = feats.shape[0]
        client_ids.extend([client.client_id] * n)
        style_ids.extend([client.shard.style_id] * n)
        labels.extend(int(x) for x in client.shard.labels)
    matrix = np.concatenate(rows, axis=0)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{which}.f64").write_bytes(matrix.astype("<f8").tobytes())
    manifest = {
        "which": which,
        "rows": int(matrix.shape[0]),
        "dim": int(matrix.shape[1]),
        "client_ids": client_ids,
        "style_ids": style_ids,
        "content_labels": labels,
    }
    (out / f"{which}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def write_results_csv(results: list[ProbeResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER] + [r.csv_row() for r in results]
    path.write_text("\n".join(lines) + "\n")
    return path


def summarize(results: list[ProbeResult]) -> dict[str, tuple[float, float]]:
    """Mean and stdev of accuracy over seeds, keyed by probe kind."""
    groups: dict[str, list[float]] = {}
    for r in results:
        kind = "generalization" if r.client_id is None else "personalization"
        groups.setdefault(kind, []).append(r.accuracy)
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in groups.items()}
