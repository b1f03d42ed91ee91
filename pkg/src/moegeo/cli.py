"""Command-line front end: configured experiments with bit-stable outputs.

Every subcommand resolves its parameters in one fixed order: built-in
defaults, then a JSON config file, then the MOEGEO_SEED environment
variable (seed only), then explicit flags. The resolved values are
written next to the results, no output embeds a timestamp, and all
randomness is derived from the seed, so re-running a command overwrites
every artifact byte for byte.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical abort.
"""

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diversity import Kernel, dpp_greedy_select, logdet_subset, marginal_gain
from .dictgen import coherent_dictionary, synthetic_classification
from .errors import (
    InvalidConfigError,
    InvalidKError,
    InvalidShapeError,
    MoegeoError,
)
from .core import mutual_coherence
from .infotheory import (
    CategoricalDist,
    RoutingBatch,
    aux_loss,
    empirical_mi,
    entropy,
    kl_sparse_project,
    mean_routing_probs,
    mi_lower_bound,
    renyi2_entropy,
    topk_conditional_entropy,
)
from .moe import MoEConfig, cross_validate, write_heatmap_csv, write_run_csv
from .rng import stream
from .sss import barrier_sweep, write_barrier_csv
from .verify import ALL_CHECKS, run_verification

_CONFIG_ERRORS = (InvalidConfigError, InvalidKError, InvalidShapeError)


@dataclass(frozen=True)
class Field:
    default: object
    kind: str  # int | float | str | bool | floatlist | strlist
    help: str


def _default_workers():
    return os.cpu_count() or 1


_BARRIER_GRID = [round(x, 10) for x in np.linspace(0.0, 0.95, 25)]

SCHEMAS = {
    "barrier": {
        "d": Field(128, "int", "ambient dimension of dictionary atoms"),
        "n_atoms": Field(64, "int", "number of dictionary atoms"),
        "k": Field(6, "int", "planted sparsity level"),
        "mu_grid": Field(_BARRIER_GRID, "floatlist",
                         "ascending coherence targets, comma separated"),
        "trials": Field(200, "int", "recovery trials per grid point"),
        "seed": Field(42, "int", "master seed"),
        "workers": Field(_default_workers(), "int",
                         "parallel workers (results are worker-independent)"),
        "output_dir": Field("out/barrier", "str", "artifact directory"),
    },
    "train": {
        "samples": Field(4000, "int", "dataset size"),
        "features": Field(100, "int", "input dimension"),
        "informative": Field(10, "int", "informative subspace dimension"),
        "classes": Field(10, "int", "number of classes"),
        "class_sep": Field(0.6, "float", "centroid separation scale"),
        "experts": Field(16, "int", "expert count"),
        "k": Field(2, "int", "active experts per sample"),
        "hidden": Field(32, "int", "expert hidden width"),
        "batch": Field(128, "int", "minibatch size"),
        "lr": Field(1e-3, "float", "AdamW learning rate"),
        "epochs": Field(30, "int", "training epochs"),
        "aux_weight": Field(0.01, "float", "load-balance loss weight"),
        "reg_weight": Field(0.1, "float", "decorrelation loss weight"),
        "reg": Field("none", "str", "regularizer: none | ortho | ncl | dpp"),
        "dpp_epsilon": Field(1e-4, "float", "Tikhonov constant for the dpp loss"),
        "folds": Field(10, "int", "stratified cross-validation folds"),
        "seed": Field(42, "int", "master seed"),
        "workers": Field(_default_workers(), "int",
                         "parallel fold workers (results are worker-independent)"),
        "output_dir": Field("out/train", "str", "artifact directory"),
    },
    "kl-project": {
        "experts": Field(8, "int", "distribution size"),
        "k": Field(2, "int", "support size to project onto"),
        "probs": Field(None, "floatlist", "explicit distribution (default: random)"),
        "seed": Field(42, "int", "seed for the random distribution"),
        "output_dir": Field("out/kl-project", "str", "artifact directory"),
    },
    "dpp-select": {
        "d": Field(32, "int", "ambient dimension"),
        "n_atoms": Field(16, "int", "number of atoms"),
        "coherence": Field(0.5, "float", "target mutual coherence of the dictionary"),
        "k": Field(4, "int", "subset size to select"),
        "seed": Field(42, "int", "master seed"),
        "output_dir": Field("out/dpp-select", "str", "artifact directory"),
    },
    "info": {
        "experts": Field(16, "int", "expert count"),
        "k": Field(2, "int", "active experts per token"),
        "tokens": Field(512, "int", "batch size"),
        "seed": Field(42, "int", "master seed"),
        "output_dir": Field("out/info", "str", "artifact directory"),
    },
    "verify": {
        "checks": Field(None, "strlist",
                        "comma-separated subset of: " + ", ".join(ALL_CHECKS)),
        "inject_fault": Field(False, "bool",
                              "corrupt the projection check (harness self-test)"),
        "seed": Field(42, "int", "master seed"),
        "output_dir": Field("out/verify", "str", "artifact directory"),
    },
}


def _coerce(command, key, kind, value):
    """Normalize a raw config-file or flag value to its schema type."""
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError
        # list kinds: JSON lists from files, comma-separated text from flags
        if value is None:
            return None
        if isinstance(value, str):
            parts = [p for p in value.split(",") if p.strip() != ""]
        elif isinstance(value, (list, tuple)):
            parts = list(value)
        else:
            raise ValueError
        if kind == "floatlist":
            return [float(p) for p in parts]
        return [str(p).strip() for p in parts]
    except (TypeError, ValueError):
        raise InvalidConfigError(
            f"{key} expects {kind}, got {value!r}") from None


def _load_file(command, path, schema):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidConfigError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"config file must hold a JSON object: {path}")
    for key in raw:
        if key not in schema:
            raise InvalidConfigError(f"unknown key '{key}'")
    return {k: _coerce(command, k, schema[k].kind, v) for k, v in raw.items()}


def resolve_config(command, args):
    """defaults < config file < MOEGEO_SEED < explicit flags."""
    schema = SCHEMAS[command]
    cfg = {k: f.default for k, f in schema.items()}
    if args.config:
        cfg.update(_load_file(command, args.config, schema))
    env_seed = os.environ.get("MOEGEO_SEED")
    if env_seed is not None and "seed" in schema:
        cfg["seed"] = _coerce(command, "seed", "int", env_seed)
    for key, field in schema.items():
        flag_value = getattr(args, key.replace("-", "_"))
        if flag_value is not None:
            cfg[key] = _coerce(command, key, field.kind, flag_value)
    return cfg


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prepare_output(cfg, config_path):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if config_path:
        dest = out / "config.json"
        if not (dest.exists() and os.path.samefile(config_path, dest)):
            shutil.copyfile(config_path, dest)
    resolved = {k: v for k, v in cfg.items()}
    _write_json(out / "resolved_config.json", resolved)
    return out


def cmd_barrier(cfg, config_path):
    out = _prepare_output(cfg, config_path)
    curve = barrier_sweep(d=cfg["d"], n_atoms=cfg["n_atoms"], k=cfg["k"],
                          mu_grid=cfg["mu_grid"], trials=cfg["trials"],
                          seed=cfg["seed"], workers=cfg["workers"])
    write_barrier_csv(curve, out / "barrier.csv")
    full = [m for m, r in zip(curve.mu_measured_mean, curve.success_rate_greedy)
            if r == 1.0]
    _write_json(out / "summary.json", {
        "theoretical_bound": curve.theoretical_bound,
        "k": curve.k,
        "trials_per_point": curve.trials_per_point,
        "mu_grid": list(curve.mu_grid),
        "mu_measured_mean": list(curve.mu_measured_mean),
        "success_rate_greedy": list(curve.success_rate_greedy),
        "success_rate_omp": list(curve.success_rate_omp),
        "largest_mu_full_greedy_success": max(full) if full else None,
    })
    print(f"wrote {out / 'barrier.csv'}")
    print(f"wrote {out / 'summary.json'}")
    return 0


def cmd_train(cfg, config_path):
    out = _prepare_output(cfg, config_path)
    dataset = synthetic_classification(
        samples=cfg["samples"], features=cfg["features"],
        informative=cfg["informative"], classes=cfg["classes"],
        class_sep=cfg["class_sep"], seed=cfg["seed"])
    config = MoEConfig(
        input_dim=cfg["features"], experts=cfg["experts"], active_k=cfg["k"],
        expert_hidden=cfg["hidden"], classes=cfg["classes"], batch=cfg["batch"],
        lr=cfg["lr"], epochs=cfg["epochs"], aux_weight=cfg["aux_weight"],
        reg_weight=cfg["reg_weight"], reg_kind=cfg["reg"], seed=cfg["seed"],
        dpp_epsilon=cfg["dpp_epsilon"])
    reports, agg = cross_validate(config, dataset, folds=cfg["folds"],
                                  workers=cfg["workers"])
    write_run_csv(out / "run.csv", reports)
    write_heatmap_csv(out / "heatmap.csv",
                      np.mean([r.heatmap for r in reports], axis=0))
    _write_json(out / "aggregate.json", {
        "reg": config.reg_kind,
        "folds": agg.folds,
        "final_accuracies": list(agg.final_accuracies),
        "mean_accuracy": agg.mean_accuracy,
        "std_accuracy": agg.std_accuracy,
        "mean_eff_rank": [float(v) for v in agg.mean_eff_rank],
        "optimizer": {"beta1": config.beta1, "beta2": config.beta2,
                      "eps": config.adam_eps, "weight_decay": config.weight_decay,
                      "lr": config.lr},
    })
    for name in ("run.csv", "heatmap.csv", "aggregate.json"):
        print(f"wrote {out / name}")
    return 0


def cmd_kl_project(cfg, config_path):
    out = _prepare_output(cfg, config_path)
    if cfg["probs"] is not None:
        p = np.asarray(cfg["probs"], dtype=float)
    else:
        gen = stream(cfg["seed"], "cli", "kl")
        p = gen.random(cfg["experts"]) + 1e-3
        p /= p.sum()
    dist = CategoricalDist(p)
    q, support, kl = kl_sparse_project(dist, cfg["k"])
    _write_json(out / "projection.json", {
        "p": [float(v) for v in dist.probs],
        "q": [float(v) for v in q.probs],
        "support": list(support),
        "kl": kl,
    })
    print(f"wrote {out / 'projection.json'}")
    return 0


def cmd_dpp_select(cfg, config_path):
    out = _prepare_output(cfg, config_path)
    dictionary = coherent_dictionary(cfg["d"], cfg["n_atoms"], cfg["coherence"],
                                     0.005, cfg["seed"])
    kernel = Kernel.from_dictionary(dictionary)
    selection = dpp_greedy_select(kernel, cfg["k"])
    gains = []
    for i in range(len(selection)):
        gains.append(marginal_gain(kernel, selection[:i], selection[i]))
    _write_json(out / "selection.json", {
        "selection": list(selection),
        "marginal_gains": gains,
        "logdet": logdet_subset(kernel, selection),
        "coherence_target": cfg["coherence"],
        "coherence_measured": mutual_coherence(dictionary),
    })
    print(f"wrote {out / 'selection.json'}")
    return 0


def cmd_info(cfg, config_path):
    out = _prepare_output(cfg, config_path)
    e, k, t = cfg["experts"], cfg["k"], cfg["tokens"]
    gen = stream(cfg["seed"], "cli", "info")
    logits = gen.standard_normal((t, e))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    selections = np.sort(np.argsort(-probs, axis=1, kind="stable")[:, :k], axis=1)
    batch = RoutingBatch(dense_probs=probs, selections=selections)
    p_bar = mean_routing_probs(batch)
    h_z, h_cond, mi = empirical_mi(batch)
    _write_json(out / "info.json", {
        "experts": e, "k": k, "tokens": t,
        "aux_loss": aux_loss(batch),
        "marginal_entropy": entropy(p_bar.probs),
        "renyi2_entropy": renyi2_entropy(p_bar),
        "collision_mass": float(np.sum(p_bar.probs ** 2)),
        "topk_conditional_entropy": topk_conditional_entropy(batch),
        "mi_lower_bound": mi_lower_bound(e, k) if k < e else 0.0,
        "empirical_mi": mi, "routing_entropy": h_z, "conditional_entropy": h_cond,
    })
    print(f"wrote {out / 'info.json'}")
    return 0


def cmd_verify(cfg, config_path):
    out = _prepare_output(cfg, config_path)
    try:
        results = run_verification(seed=cfg["seed"], checks=cfg["checks"],
                                   inject_fault=cfg["inject_fault"])
    except KeyError as exc:
        raise InvalidConfigError(str(exc.args[0])) from None
    all_pass = all(r.passed for r in results)
    _write_json(out / "verify.json", {
        "all_pass": all_pass,
        "checks": [r.as_dict() for r in results],
    })
    for r in results:
        print(f"check {r.name}: {'PASS' if r.passed else 'FAIL'}")
    print(f"wrote {out / 'verify.json'}")
    return 0 if all_pass else 1


HANDLERS = {
    "barrier": cmd_barrier,
    "train": cmd_train,
    "kl-project": cmd_kl_project,
    "dpp-select": cmd_dpp_select,
    "info": cmd_info,
    "verify": cmd_verify,
}

_COMMAND_HELP = {
    "barrier": "sweep greedy/OMP exact-recovery rates across coherence targets",
    "train": "cross-validated mixture-of-experts training with chosen regularizer",
    "kl-project": "project a distribution onto the k-sparse probability set",
    "dpp-select": "greedy log-det subset selection on a dictionary kernel",
    "info": "routing entropy, load-balance, and mutual-information report",
    "verify": "run the analytic self-audit suite",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moegeo",
        description="Numerical laboratory for sparse routing geometry.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command, help=_COMMAND_HELP[command])
        p.add_argument("--config", default=None,
                       help="JSON config file; flags override its values")
        for key, field in schema.items():
            flag = "--" + key
            if field.kind == "bool":
                p.add_argument(flag, dest=key, action="store_const", const="true",
                               default=None, help=field.help)
            else:
                p.add_argument(flag, dest=key.replace("-", "_"), default=None,
                               metavar=field.kind.upper(),
                               help=f"{field.help} (default: {field.default})")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return HANDLERS[args.command](cfg, args.config)
    except _CONFIG_ERRORS as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2
    except MoegeoError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
