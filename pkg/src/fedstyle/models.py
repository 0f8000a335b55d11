"""Networks as named parameter sets over the autodiff core.

Encoders are multi-layer perceptrons over flattened pixels (batchnorm+relu
hidden blocks, plain linear head); projector, generator and predictor are
two-layer relu MLPs. A ParamSet keeps tensors in canonical insertion order
so flatten/unflatten round-trips losslessly for aggregation.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad


class ParamSet:
    """Ordered, named collection of tensors for one or more networks.

    Batchnorm running statistics ride along as non-trainable tensors; they
    flatten and aggregate like weights but never receive gradients.
    """

    def __init__(self, tag: str = ""):
        self.tag = tag
        self._names: list[str] = []
        self._tensors: dict[str, ad.Tensor] = {}

    def add(self, name: str, array: np.ndarray, requires_grad: bool = True) -> ad.Tensor:
        if name in self._tensors:
            raise ValueError(f"ParamSet: duplicate name {name!r}")
        t = ad.Tensor(np.asarray(array, dtype=np.float64), requires_grad=requires_grad)
        self._names.append(name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def items(self):
        return [(n, self._tensors[n]) for n in self._names]

    def tensors(self, prefix: str | None = None, trainable_only: bool = False) -> list[ad.Tensor]:
        out = []
        for n in self._names:
            if prefix is not None and not n.startswith(prefix):
                continue
            t = self._tensors[n]
            if trainable_only and not t.requires_grad:
                continue
            out.append(t)
        return out

    def trainable(self, prefix: str | None = None) -> list[ad.Tensor]:
        return self.tensors(prefix=prefix, trainable_only=True)

    def clone(self) -> "ParamSet":
        out = ParamSet(self.tag)
        for n in self._names:
            t = self._tensors[n]
            out.add(n, t.data.copy(), requires_grad=t.requires_grad)
        return out

    def copy_from(self, other: "ParamSet", prefix: str | None = None) -> None:
        """Overwrite values (matching names) from another set."""
        for n in self._names:
            if prefix is not None and not n.startswith(prefix):
                continue
            if n not in other:
                raise ValueError(f"ParamSet.copy_from: {n!r} missing from source")
            src = other[n].data
            if src.shape != self._tensors[n].data.shape:
                raise ValueError(f"ParamSet.copy_from: shape mismatch for {n!r}")
            self._tensors[n].data = src.copy()

    def flatten(self) -> np.ndarray:
        if not self._names:
            return np.zeros(0)
        return np.concatenate([self._tensors[n].data.reshape(-1) for n in self._names])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """New ParamSet with this set's names/shapes and values from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        total = int(np.sum([self._tensors[n].data.size for n in self._names]))
        if vec.shape != (total,):
            raise ValueError(f"unflatten: expected vector of length {total}, got {vec.shape}")
        out = ParamSet(self.tag)
        pos = 0
        for n in self._names:
            t = self._tensors[n]
            size = t.data.size
            out.add(n, vec[pos:pos + size].reshape(t.data.shape), requires_grad=t.requires_grad)
            pos += size
        return out

    def equals_bitwise(self, other: "ParamSet", prefix: str | None = None) -> bool:
        for n in self._names:
            if prefix is not None and not n.startswith(prefix):
                continue
            if n not in other or self._tensors[n].data.tobytes() != other[n].data.tobytes():
                return False
        return True

    def set_requires_grad(self, flag: bool, prefix: str | None = None) -> None:
        for n in self._names:
            if prefix is not None and not n.startswith(prefix):
                continue
            t = self._tensors[n]
            if flag and not t.requires_grad and (".mean" in n or ".var" in n):
                continue  # buffers never become trainable
            t.requires_grad = flag


def _he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def _add_linear(ps: ParamSet, rng: np.random.Generator, name: str,
                fan_in: int, fan_out: int) -> None:
    ps.add(f"{name}.w", _he_init(rng, fan_in, fan_out))
    ps.add(f"{name}.b", np.zeros(fan_out))


def _add_batchnorm(ps: ParamSet, name: str, dim: int) -> None:
    ps.add(f"{name}.gamma", np.ones(dim))
    ps.add(f"{name}.beta", np.zeros(dim))
    ps.add(f"{name}.mean", np.zeros(dim), requires_grad=False)
    ps.add(f"{name}.var", np.ones(dim), requires_grad=False)


def init_encoder(ps: ParamSet, rng: np.random.Generator, in_dim: int,
                 hidden: tuple[int, ...], out_dim: int,
                 batchnorm: bool = True, prefix: str = "enc") -> None:
    dims = [in_dim, *hidden]
    for i in range(len(hidden)):
        _add_linear(ps, rng, f"{prefix}.l{i}", dims[i], dims[i + 1])
        if batchnorm:
            _add_batchnorm(ps, f"{prefix}.bn{i}", dims[i + 1])
    _add_linear(ps, rng, f"{prefix}.out", dims[-1], out_dim)


def init_two_layer(ps: ParamSet, rng: np.random.Generator, in_dim: int,
                   hidden: int, out_dim: int, prefix: str) -> None:
    _add_linear(ps, rng, f"{prefix}.l0", in_dim, hidden)
    _add_linear(ps, rng, f"{prefix}.out", hidden, out_dim)


def init_content(rng: np.random.Generator, in_dim: int, encoder_hidden: tuple[int, ...],
                 feature_dim: int, proj_hidden: int, embed_dim: int,
                 batchnorm: bool = True, tag: str = "content") -> ParamSet:
    """Encoder + projector in one set: the thing the server aggregates."""
    ps = ParamSet(tag)
    init_encoder(ps, rng, in_dim, encoder_hidden, feature_dim, batchnorm=batchnorm)
    init_two_layer(ps, rng, feature_dim, proj_hidden, embed_dim, prefix="proj")
    return ps


def init_style(rng: np.random.Generator, in_dim: int, encoder_hidden: tuple[int, ...],
               feature_dim: int, proj_hidden: int, embed_dim: int,
               batchnorm: bool = True) -> ParamSet:
    ps = ParamSet("style")
    init_encoder(ps, rng, in_dim, encoder_hidden, feature_dim, batchnorm=batchnorm)
    init_two_layer(ps, rng, feature_dim, proj_hidden, embed_dim, prefix="proj")
    return ps


def init_generator(rng: np.random.Generator, feature_dim: int, hidden: int) -> ParamSet:
    ps = ParamSet("generator")
    init_two_layer(ps, rng, 2 * feature_dim, hidden, feature_dim, prefix="gen")
    return ps


def init_predictor(rng: np.random.Generator, embed_dim: int, hidden: int) -> ParamSet:
    ps = ParamSet("predictor")
    init_two_layer(ps, rng, embed_dim, hidden, embed_dim, prefix="pred")
    return ps


def _as_rows(x) -> ad.Tensor:
    """Flatten image batches to (B, P) rows; pass (B, P) tensors through."""
    if isinstance(x, ad.Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        arr = arr.reshape(arr.shape[0], -1)
    return ad.constant(arr)


def encoder_forward(ps: ParamSet, x, training: bool = True, prefix: str = "enc") -> ad.Tensor:
    """Pixels -> feature rows (B, D_h). Eval mode uses running batch stats."""
    h = _as_rows(x)
    if h.data.shape[0] == 0:
        raise ValueError("encoder_forward: empty batch")
    i = 0
    while f"{prefix}.l{i}.w" in ps:
        h = ad.add(ad.matmul(h, ps[f"{prefix}.l{i}.w"]), ps[f"{prefix}.l{i}.b"])
        if f"{prefix}.bn{i}.gamma" in ps:
            h = ad.batchnorm1d(h, ps[f"{prefix}.bn{i}.gamma"], ps[f"{prefix}.bn{i}.beta"],
                               ps[f"{prefix}.bn{i}.mean"], ps[f"{prefix}.bn{i}.var"],
                               training=training)
        h = ad.relu(h)
        i += 1
    return ad.add(ad.matmul(h, ps[f"{prefix}.out.w"]), ps[f"{prefix}.out.b"])


def two_layer_forward(ps: ParamSet, x, prefix: str) -> ad.Tensor:
    h = ad.relu(ad.add(ad.matmul(_as_rows(x), ps[f"{prefix}.l0.w"]), ps[f"{prefix}.l0.b"]))
    return ad.add(ad.matmul(h, ps[f"{prefix}.out.w"]), ps[f"{prefix}.out.b"])


def projector_forward(ps: ParamSet, h) -> ad.Tensor:
    return two_layer_forward(ps, h, "proj")


def generator_forward(ps: ParamSet, h_c, h_s) -> ad.Tensor:
    """Stylized content feature from concat[h_c, h_s] (both (B, D_h))."""
    h_c, h_s = _as_rows(h_c), _as_rows(h_s)
    if h_c.shape != h_s.shape:
        raise ValueError(f"generator_forward: shape mismatch {h_c.shape} vs {h_s.shape}")
    return two_layer_forward(ps, ad.concat(h_c, h_s, axis=1), "gen")


def predictor_forward(ps: ParamSet, z) -> ad.Tensor:
    return two_layer_forward(ps, z, "pred")


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw little-endian f64 blob


def save_params(ps: ParamSet, path_prefix: str | Path) -> None:
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tag": ps.tag,
        "tensors": [
            {"name": n, "shape": list(t.data.shape), "trainable": t.requires_grad}
            for n, t in ps.items()
        ],
    }
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    prefix.with_suffix(".f64").write_bytes(ps.flatten().astype("<f8").tobytes())


def load_params(path_prefix: str | Path) -> ParamSet:
    prefix = Path(path_prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    vec = np.frombuffer(prefix.with_suffix(".f64").read_bytes(), dtype="<f8").astype(np.float64)
    ps = ParamSet(manifest["tag"])
    pos = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        ps.add(entry["name"], vec[pos:pos + size].reshape(shape),
               requires_grad=bool(entry["trainable"]))
        pos += size
    if pos != vec.size:
        raise ValueError(f"{prefix}: blob holds {vec.size} values, manifest expects {pos}")
    return ps
