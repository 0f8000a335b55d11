"""Brute-force reference implementations of the contrastive losses.

Deliberately written as explicit per-pair loops on plain floats — a separate
route from the vectorized tape implementations in ``losses`` — so the two can
be checked against each other (``oracle-check`` subcommand, acceptance
criterion on loss equivalence).
"""
from __future__ import annotations

import math

import numpy as np


def _normalize_rows(z: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    out = np.array(z, dtype=np.float64, copy=True)
    for i in range(out.shape[0]):
        n = math.sqrt(float((out[i] * out[i]).sum()))
        out[i] = out[i] / n if n > eps else 0.0
    return out


def nt_xent_reference(z1: np.ndarray, z2: np.ndarray, tau: float) -> float:
    z = _normalize_rows(np.concatenate([np.asarray(z1), np.asarray(z2)], axis=0))
    n = z.shape[0]
    b = n // 2
    total = 0.0
    for i in range(n):
        pos = (i + b) % n
        denom = 0.0
        for j in range(n):
            if j != i:
                denom += math.exp(float(z[i] @ z[j]) / tau)
        total += -math.log(math.exp(float(z[i] @ z[pos]) / tau) / denom)
    return total / n


def style_infonce_reference(z_all: np.ndarray, style_labels, tau: float) -> float:
    z = _normalize_rows(np.asarray(z_all))
    labels = list(style_labels)
    n = z.shape[0]
    total = 0.0
    for i in range(n):
        anchor = 0.0
        for j in range(n):
            if j == i or labels[i] != labels[j]:
                continue
            denom = 0.0
            for k in range(n):
                if k != i:
                    denom += math.exp(float(z[i] @ z[k]) / tau)
            anchor += -math.log(math.exp(float(z[i] @ z[j]) / tau) / denom)
        total += anchor / (n - 1)
    return total


def simsiam_reference(p1: np.ndarray, z2: np.ndarray, p2: np.ndarray, z1: np.ndarray) -> float:
    def cos_rows(a, b):
        vals = []
        for i in range(a.shape[0]):
            na = math.sqrt(float((a[i] * a[i]).sum()))
            nb = math.sqrt(float((b[i] * b[i]).sum()))
            if na <= 1e-12 or nb <= 1e-12:
                vals.append(0.0)
            else:
                vals.append(float(a[i] @ b[i]) / (na * nb))
        return vals

    c1 = cos_rows(np.asarray(p1), np.asarray(z2))
    c2 = cos_rows(np.asarray(p2), np.asarray(z1))
    n = len(c1)
    return -0.5 * (math.fsum(c1) / n + math.fsum(c2) / n)


def run_loss_oracle_checks(batch_sizes=(1, 2, 3, 4), draws: int = 5,
                           dim: int = 6, tol: float = 1e-10, seed: int = 7,
                           verbose: bool = False) -> bool:
    """Compare tape losses with these references on random embeddings."""
    from . import losses

    rng = np.random.default_rng(seed)
    ok = True
    for b in batch_sizes:
        worst_nt = worst_st = 0.0
        for _ in range(draws):
            z1 = rng.standard_normal((b, dim))
            z2 = rng.standard_normal((b, dim))
            got = float(losses.nt_xent(z1, z2, tau=0.07).data)
            want = nt_xent_reference(z1, z2, tau=0.07)
            worst_nt = max(worst_nt, abs(got - want))

            z_all = rng.standard_normal((2 * b, dim))
            labels = np.array([0] * b + [1] * b)
            got = float(losses.style_infonce(z_all, labels, tau=0.07).data)
            want = style_infonce_reference(z_all, labels, tau=0.07)
            worst_st = max(worst_st, abs(got - want))
        good = worst_nt <= tol and worst_st <= tol
        ok = ok and good
        if verbose:
            print(f"{'ok  ' if good else 'FAIL'} B={b}  nt_xent |err| {worst_nt:.2e}  "
                  f"style_infonce |err| {worst_st:.2e}")
    return ok
