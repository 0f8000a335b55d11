"""Experiment configuration: defaults, validation, TOML/JSON round-trip.

Schedule and loss defaults mirror the experimental protocol (100 rounds,
5 local epochs, 10 style-extraction epochs, batch 64, SGD lr 0.1,
temperature 0.07); model dimensions default to desk scale (feature dim 64,
embed dim 32) with the full-size values reachable through the config.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

METHODS = ("fedavg", "fedper", "fedrep", "fedprox", "apfl", "ditto", "fedstyle")
VARIANTS = ("simclr", "simsiam")

OUT_ROOT_ENV = "FEDSTYLE_OUT"


@dataclass
class ExperimentConfig:
    method: str = "fedavg"
    variant: str = "simclr"

    # synthetic data (ignored when idx_images is given)
    num_classes: int = 5
    num_styles: int = 3
    per_class: int = 120
    image_size: int = 16
    # optional IDX ingestion: one (images, labels) pair per style
    idx_images: list[str] = field(default_factory=list)
    idx_labels: list[str] = field(default_factory=list)

    # partition
    clients_per_style: int = 1
    beta: float | None = None  # None -> IID
    samples_per_client: int = 300
    train_frac: float = 0.7

    # schedule
    rounds: int = 100             # communication rounds
    local_epochs: int = 5
    style_epochs: int = 10
    sample_fraction: float = 1.0  # alpha; 0.5 is the multi-client setting

    # loss / optimizer
    lam: float = 0.5              # style-infused loss scale
    tau: float = 0.07
    mu_prox: float = 0.2
    mu_ditto: float = 2.0
    apfl_alpha: float = 0.5
    apfl_literal_mixing: bool = False
    freeze_generator_pretrain: bool = False
    lr: float = 0.1
    batch_size: int = 64

    # model dims (desk defaults; 256/128 projector widths fit through here)
    encoder_hidden: list[int] = field(default_factory=lambda: [256, 128])
    feature_dim: int = 64
    hidden_dim: int = 64
    embed_dim: int = 32
    batchnorm: bool = True

    # evaluation
    probe_epochs: int = 100
    probe_lr: float = 0.1
    personalization_stylized: bool = True

    # run
    seeds: list[int] = field(default_factory=lambda: [2011, 2015, 2021, 2022])
    threads: int = 0              # 0 -> available cores
    checkpoint_every: int = 0     # 0 -> final checkpoint only
    out_dir: str = "runs/experiment"

    # ------------------------------------------------------------------
    def validate(self) -> None:
        """Raise ValueError naming the offending field."""
        def fail(fieldname: str, msg: str):
            raise ValueError(f"config.{fieldname}: {msg}")

        if self.method not in METHODS:
            fail("method", f"must be one of {METHODS}, got {self.method!r}")
        if self.variant not in VARIANTS:
            fail("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if bool(self.idx_images) != bool(self.idx_labels):
            fail("idx_labels", "idx_images and idx_labels must be given together")
        if self.idx_images and len(self.idx_images) != len(self.idx_labels):
            fail("idx_labels", "need exactly one labels file per images file")
        if not self.idx_images:
            if self.num_classes < 2:
                fail("num_classes", "need at least 2 content classes")
            if self.num_styles < 2:
                fail("num_styles", "need at least 2 styles")
            if self.per_class < 1:
                fail("per_class", "must be positive")
            if self.image_size < 8:
                fail("image_size", "must be at least 8")
        if self.clients_per_style < 1:
            fail("clients_per_style", "must be positive")
        if self.beta is not None and self.beta <= 0:
            fail("beta", "must be positive (or omitted for IID)")
        if self.samples_per_client < 4:
            fail("samples_per_client", "too small to split into train/test")
        if not 0.0 < self.train_frac < 1.0:
            fail("train_frac", "must be in (0, 1)")
        if self.rounds < 0:
            fail("rounds", "must be non-negative")
        if self.local_epochs < 1:
            fail("local_epochs", "must be positive")
        if self.style_epochs < 0:
            fail("style_epochs", "must be non-negative")
        if not 0.0 < self.sample_fraction <= 1.0:
            fail("sample_fraction", "must be in (0, 1]")
        n_clients = self.num_style_count() * self.clients_per_style
        if int(self.sample_fraction * n_clients) < 1:
            fail("sample_fraction", f"selects zero of {n_clients} clients")
        if self.lam < 0:
            fail("lam", "must be non-negative")
        if self.tau <= 0:
            fail("tau", "must be positive")
        if self.mu_prox < 0 or self.mu_ditto < 0:
            fail("mu_prox", "proximal strengths must be non-negative")
        if not 0.0 <= self.apfl_alpha <= 1.0:
            fail("apfl_alpha", "must be in [0, 1]")
        if self.lr <= 0:
            fail("lr", "must be positive")
        if self.batch_size < 2:
            fail("batch_size", "must be at least 2 (batchnorm needs it)")
        if self.feature_dim < 1 or self.embed_dim < 1 or self.hidden_dim < 1:
            fail("feature_dim", "model dims must be positive")
        if not self.encoder_hidden or any(h < 1 for h in self.encoder_hidden):
            fail("encoder_hidden", "need at least one positive hidden width")
        if self.probe_epochs < 0:
            fail("probe_epochs", "must be non-negative")
        if self.probe_lr <= 0:
            fail("probe_lr", "must be positive")
        if not self.seeds:
            fail("seeds", "need at least one seed")
        if any(s < 0 for s in self.seeds):
            fail("seeds", "seeds must be non-negative")
        if self.threads < 0:
            fail("threads", "must be non-negative (0 = available cores)")
        if self.checkpoint_every < 0:
            fail("checkpoint_every", "must be non-negative")

    def num_style_count(self) -> int:
        return len(self.idx_images) if self.idx_images else self.num_styles

    def num_clients(self) -> int:
        return self.num_style_count() * self.clients_per_style

    def resolved_out_dir(self) -> Path:
        root = os.environ.get(OUT_ROOT_ENV)
        return (Path(root) / self.out_dir) if root else Path(self.out_dir)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown fields {sorted(unknown)}")
        return cls(**data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def serialize(config: ExperimentConfig) -> str:
    """Flat TOML document; None fields are omitted (TOML has no null)."""
    lines = ["# fedstyle experiment configuration"]
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if v is None:
            continue
        lines.append(f"{f.name} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> ExperimentConfig:
    """Parse TOML (or JSON, as the alternative format) into a config."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    return ExperimentConfig.from_dict(data)


def load(path: str | Path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def save(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(config))
