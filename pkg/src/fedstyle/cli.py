"""Command-line surface: gen-data, train, eval, export-embeddings,
grad-check, oracle-check.

Every subcommand takes --config (TOML, or JSON) plus long-form flag
overrides; runs are laid out as <out-dir>/seed_<seed>/ with a resolved
config snapshot, metrics.jsonl, timings.jsonl and checkpoints, which is
enough to re-derive every reported number. FEDSTYLE_OUT prepends an output
root.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import datasets, engine, evaluation, gradcheck, models, oracles
from .config import ExperimentConfig


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="TOML or JSON config file")
    p.add_argument("--method", choices=config_mod.METHODS)
    p.add_argument("--variant", choices=config_mod.VARIANTS)
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int, dest="local_epochs")
    p.add_argument("--style-epochs", type=int, dest="style_epochs")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--tau", type=float)
    p.add_argument("--mu-prox", type=float, dest="mu_prox")
    p.add_argument("--mu-ditto", type=float, dest="mu_ditto")
    p.add_argument("--apfl-alpha", type=float, dest="apfl_alpha")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--sample-fraction", type=float, dest="sample_fraction")
    p.add_argument("--beta", type=float, help="Dirichlet concentration (omit for IID)")
    p.add_argument("--iid", action="store_true", help="force IID splits (clears beta)")
    p.add_argument("--clients-per-style", type=int, dest="clients_per_style")
    p.add_argument("--samples-per-client", type=int, dest="samples_per_client")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--num-styles", type=int, dest="num_styles")
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--encoder-hidden", help="comma-separated widths, e.g. 256,128")
    p.add_argument("--probe-epochs", type=int, dest="probe_epochs")
    p.add_argument("--probe-lr", type=float, dest="probe_lr")
    p.add_argument("--seed", type=int, action="append", dest="seed_list",
                   help="repeatable; replaces the config seed list")
    p.add_argument("--threads", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--no-batchnorm", action="store_true")
    p.add_argument("--no-stylized-probe", action="store_true",
                   help="personalization probes use the plain content feature")
    p.add_argument("--freeze-generator-pretrain", action="store_true")
    p.add_argument("--apfl-literal-mixing", action="store_true")


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    simple = [
        "method", "variant", "rounds", "local_epochs", "style_epochs", "lam",
        "tau", "mu_prox", "mu_ditto", "apfl_alpha", "lr", "batch_size",
        "sample_fraction", "beta", "clients_per_style", "samples_per_client",
        "num_classes", "num_styles", "per_class", "image_size", "feature_dim",
        "hidden_dim", "embed_dim", "probe_epochs", "probe_lr", "threads",
        "checkpoint_every", "out_dir",
    ]
    for name in simple:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "encoder_hidden", None):
        cfg.encoder_hidden = [int(x) for x in args.encoder_hidden.split(",")]
    if getattr(args, "seed_list", None):
        cfg.seeds = list(args.seed_list)
    if getattr(args, "iid", False):
        cfg.beta = None
    if getattr(args, "no_batchnorm", False):
        cfg.batchnorm = False
    if getattr(args, "no_stylized_probe", False):
        cfg.personalization_stylized = False
    if getattr(args, "freeze_generator_pretrain", False):
        cfg.freeze_generator_pretrain = True
    if getattr(args, "apfl_literal_mixing", False):
        cfg.apfl_literal_mixing = True
    cfg.validate()
    return cfg


def _seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.resolved_out_dir() / f"seed_{seed}"


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    seed = cfg.seeds[0]
    data = engine.build_style_datasets(cfg, seed)
    out = cfg.resolved_out_dir() / "data"
    datasets.save_datasets(data, out, seed=seed)
    print(f"wrote {len(data)} style datasets "
          f"({sum(len(d) for d in data)} images) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    for seed in cfg.seeds:
        out = _seed_dir(cfg, seed)
        result = engine.run(cfg, seed, out_dir=out)
        final = result.reports[-1].client_losses if result.reports else {}
        mean_loss = float(np.mean(list(final.values()))) if final else float("nan")
        print(f"seed {seed}: {cfg.rounds} rounds of {cfg.method}/{cfg.variant}, "
              f"final mean client loss {mean_loss:.4f} -> {out}")
    return 0


def _load_run_clients(cfg: ExperimentConfig, seed: int, out: Path):
    """Rebuild data deterministically and load trained parameters."""
    style_data, _, clients = engine.prepare(cfg, seed)
    ckpt = out / "checkpoints"
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt}: no checkpoints (run `train` first)")
    global_params = models.load_params(ckpt / "global")
    for client in clients:
        base = ckpt / f"client_{client.client_id:03d}"
        client.content = models.load_params(base / "content")
        for name in ("global_copy", "style", "generator", "predictor"):
            if (base / name).with_suffix(".json").exists():
                setattr(client, name, models.load_params(base / name))
    return style_data, global_params, clients


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    results = []
    for seed in cfg.seeds:
        out = _seed_dir(cfg, seed)
        style_data, global_params, clients = _load_run_clients(cfg, seed, out)
        results.extend(evaluation.eval_generalization(global_params, style_data, cfg, seed))
        for client in clients:
            results.append(evaluation.eval_personalization(client, cfg, seed))
    csv_path = cfg.resolved_out_dir() / "results.csv"
    evaluation.write_results_csv(results, csv_path)
    for kind, (mean, std) in sorted(evaluation.summarize(results).items()):
        print(f"{cfg.method}/{cfg.variant} {kind}: {mean:.4f} +- {std:.4f} "
              f"over {len(cfg.seeds)} seed(s)")
    print(f"results -> {csv_path}")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _build_config(args)
    for seed in cfg.seeds:
        out = _seed_dir(cfg, seed)
        _, _, clients = _load_run_clients(cfg, seed, out)
        target = evaluation.export_embeddings(clients, args.which, out / "embeddings")
        print(f"seed {seed}: exported {args.which} -> {target}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_all(instances=args.instances, tol=1e-5, verbose=True)
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} gradient checks passed")
    return 1 if bad else 0


def cmd_oracle_check(args) -> int:
    ok = oracles.run_loss_oracle_checks(verbose=True)
    print("loss implementations match brute-force oracles" if ok
          else "loss oracle mismatch")
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedstyle",
        description="Desk-scale federated unsupervised representation learning "
                    "with style infusion")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, extra in [
        ("gen-data", cmd_gen_data, None),
        ("train", cmd_train, None),
        ("eval", cmd_eval, None),
        ("export-embeddings", cmd_export_embeddings, "which"),
        ("grad-check", cmd_grad_check, "instances"),
        ("oracle-check", cmd_oracle_check, None),
    ]:
        p = sub.add_parser(name)
        if name in ("gen-data", "train", "eval", "export-embeddings"):
            _add_override_flags(p)
        if extra == "which":
            p.add_argument("--which", choices=("h_c", "h_s"), default="h_s")
        if extra == "instances":
            p.add_argument("--instances", type=int, default=10)
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, engine.RoundAbort) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
