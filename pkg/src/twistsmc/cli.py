"""Command-line interface.

Subcommands:

- ``run``      trust-region twisted SMC from a config file; writes the
               per-iteration metrics table and the final twist.
- ``compare``  method comparison table under matched budgets.
- ``oracle``   exact optimal twist, exact log Z, and escort curves for a
               model (curves taken under the identity twist).
- ``diagnose`` escort/chi^2 table for a model plus a twist file.

Shared flags: ``--config`` (required), ``--seed``, ``--out``, ``--path-cap``.
Config files use the same JSON document format as models.  Exit codes:
0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import modelio
from .errors import ConfigError, DegenerateWeightsError, DivergenceError, TwistSmcError
from .fk import DEFAULT_PATH_CAP, exact_log_Z
from .harness import (
    ExperimentConfig,
    builtin_chain,
    builtin_masked_toy,
    compare_methods,
    schedule_from_interval,
    tri_tsmc,
)
from .learn import FitConfig
from .optimal import backward_recursion
from .trust_region import escort_diagnostics
from .twist import TwistFunction


def _resolve_model(doc: dict, base_dir: str):
    if "file" in doc:
        path = os.path.join(base_dir, doc["file"])
        return modelio.load_model(path), {"file": doc["file"]}
    builtin = doc.get("builtin")
    if builtin == "chain":
        args = {
            "S": int(doc.get("S", 6)),
            "T": int(doc.get("T", 6)),
            "reward_spread": float(doc.get("reward_spread", 4.0)),
            "seed": int(doc.get("seed", 0)),
        }
        return builtin_chain(**args), {"builtin": "chain", **args}
    if builtin == "masked":
        args = {
            "L": int(doc.get("L", 3)),
            "V": int(doc.get("V", 4)),
            "seed": int(doc.get("seed", 0)),
        }
        return builtin_masked_toy(**args), {"builtin": "masked", **args}
    raise ConfigError(f"model section needs 'file' or a known 'builtin', got {doc}")


def load_experiment(path: str, overrides: dict) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict) or "model" not in raw:
        raise ConfigError("config must be a JSON object with a 'model' section")
    base_dir = os.path.dirname(os.path.abspath(path))
    model, model_source = _resolve_model(raw["model"], base_dir)

    schedule = None
    sched_doc = raw.get("schedule")
    if sched_doc is not None:
        if "interval" in sched_doc:
            schedule = schedule_from_interval(model.horizon, int(sched_doc["interval"]))
        elif "steps" in sched_doc:
            schedule = tuple(int(t) for t in sched_doc["steps"])
        else:
            raise ConfigError("schedule section needs 'interval' or 'steps'")

    fit_doc = raw.get("fit", {})
    try:
        fit = FitConfig(
            step_size=float(fit_doc.get("step_size", 0.1)),
            n_steps=int(fit_doc.get("n_steps", 200)),
            gradient_clip_norm=float(fit_doc.get("clip_norm", 10.0)),
            optimizer=str(fit_doc.get("optimizer", "gd")),
            tol=float(fit_doc.get("tol", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad fit section: {exc}") from exc

    init_doc = raw.get("init_twist", "identity")
    if isinstance(init_doc, dict) and "file" in init_doc:
        init_twist: TwistFunction | str = modelio.load_twist(
            os.path.join(base_dir, init_doc["file"])
        )
    else:
        init_twist = str(init_doc)

    twist_doc = raw.get("twist", {})
    try:
        cfg = ExperimentConfig(
            model=model,
            model_source=model_source,
            n_particles=int(raw.get("particles", 64)),
            iterations=int(raw.get("iterations", 5)),
            epsilon=float(raw.get("epsilon", 0.2)),
            schedule=schedule,
            fit=fit,
            seed=int(overrides.get("seed", raw.get("seed", 0))),
            twist_family=str(twist_doc.get("family", "tabular")),
            init_twist=init_twist,
            exact_particles=bool(raw.get("exact_particles", False)),
            path_cap=int(overrides.get("path_cap", raw.get("path_cap", DEFAULT_PATH_CAP))),
            out_dir=overrides.get("out", raw.get("out", ".")),
            methods=tuple(raw.get("methods", ("base", "best_of_n", "potential_smc", "tri_tsmc"))),
            n_seeds=int(raw.get("n_seeds", 20)),
            budgets=raw.get("budgets"),
            potential_variant=str(raw.get("potential_variant", "diff")),
            lambda_scale=float(raw.get("lambda_scale", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    cfg.tau_grid_points = int(raw.get("tau_grid_points", 21))
    cfg.twist_file = twist_doc.get("file")
    cfg.config_path = os.path.abspath(path)
    return cfg


def _header(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "model": cfg.model_source,
        "particles": cfg.n_particles,
        "iterations": cfg.iterations,
        "epsilon": cfg.epsilon,
        "schedule": list(cfg.schedule),
        "seed": cfg.seed,
        "twist_family": cfg.twist_family,
        "path_cap": cfg.path_cap,
        "fit": {
            "step_size": cfg.fit.step_size,
            "n_steps": cfg.fit.n_steps,
            "clip_norm": cfg.fit.gradient_clip_norm,
            "optimizer": cfg.fit.optimizer,
            "tol": cfg.fit.tol,
        },
    }


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
    print(path)


def cmd_run(cfg: ExperimentConfig) -> None:
    result = tri_tsmc(cfg)
    cols = [
        "iteration", "log_Z_estimate", "final_ess", "lambda_hat", "tau_hat",
        "beta", "exact_kl_to_target", "exact_chi2", "weighted_reward",
        "fit_loss_first", "fit_loss_last", "fit_steps", "ess_sequence",
    ]
    rows = [
        [
            m.iteration, m.log_Z_estimate, m.final_ess, m.lambda_hat, m.tau_hat,
            m.beta, m.exact_kl_to_target, m.exact_chi2, m.weighted_reward,
            m.fit_loss_first, m.fit_loss_last, m.fit_steps,
            " ".join(modelio.format_cell(float(e)) for e in m.ess_sequence),
        ]
        for m in result.metrics
    ]
    out = cfg.out_dir or "."
    _write(os.path.join(out, "metrics.tsv"),
           modelio.format_table(cols, rows, header=_header(cfg, "run")))
    modelio.save_twist(result.final_params.to_twist(), os.path.join(out, "twist_final.json"))
    print(os.path.join(out, "twist_final.json"))


def cmd_compare(cfg: ExperimentConfig) -> None:
    summaries = compare_methods(cfg)
    cols = [
        "method", "particles", "runs", "mean_reward", "sd_reward",
        "mean_final_ess", "var_log_Z", "trajectories_per_run", "kernel_draws_per_run",
    ]
    rows = [
        [
            s.method, s.n_particles, s.n_runs, s.mean_reward, s.sd_reward,
            s.mean_final_ess, s.var_log_Z, s.n_trajectories, s.n_kernel_draws,
        ]
        for s in summaries
    ]
    out = cfg.out_dir or "."
    _write(os.path.join(out, "comparison.tsv"),
           modelio.format_table(cols, rows, header=_header(cfg, "compare")))


def _diagnostics_rows(cfg: ExperimentConfig, twist: TwistFunction):
    taus = np.linspace(0.0, 1.0, getattr(cfg, "tau_grid_points", 21))
    diag = escort_diagnostics(cfg.model, twist, taus, path_cap=cfg.path_cap)
    return [
        [t, l, kp, kt, c2]
        for t, l, kp, kt, c2 in zip(
            diag.taus, diag.Lambda, diag.kl_to_proposal, diag.kl_to_target,
            diag.chi2_to_target,
        )
    ]


def cmd_oracle(cfg: ExperimentConfig) -> None:
    result = backward_recursion(cfg.model)
    out = cfg.out_dir or "."
    modelio.save_twist(result.psi_star, os.path.join(out, "psi_star.json"))
    print(os.path.join(out, "psi_star.json"))
    header = _header(cfg, "oracle")
    header["exact_log_Z"] = exact_log_Z(cfg.model)
    header["log_Z_from_recursion"] = result.log_Z_from_recursion
    rows = _diagnostics_rows(cfg, TwistFunction.identity(cfg.model.state_sizes))
    cols = ["tau", "Lambda", "kl_to_proposal", "kl_to_target", "chi2"]
    _write(os.path.join(out, "oracle.tsv"), modelio.format_table(cols, rows, header=header))


def cmd_diagnose(cfg: ExperimentConfig) -> None:
    if getattr(cfg, "twist_file", None):
        base_dir = os.path.dirname(getattr(cfg, "config_path", "."))
        twist = modelio.load_twist(os.path.join(base_dir, cfg.twist_file))
    else:
        twist = TwistFunction.identity(cfg.model.state_sizes)
    rows = _diagnostics_rows(cfg, twist)
    cols = ["tau", "Lambda", "kl_to_proposal", "kl_to_target", "chi2"]
    out = cfg.out_dir or "."
    _write(os.path.join(out, "diagnostics.tsv"),
           modelio.format_table(cols, rows, header=_header(cfg, "diagnose")))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twistsmc",
        description="Trust-region twisted SMC for finite Feynman-Kac models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("run", "run the trust-region twisted SMC loop"),
        ("compare", "compare methods under matched budgets"),
        ("oracle", "emit the optimal twist, exact log Z and escort curves"),
        ("diagnose", "emit escort/chi^2 curves for a model plus twist"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--path-cap", type=int, default=None, help="override the path cap")
    return parser


_COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "oracle": cmd_oracle,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.path_cap is not None:
        overrides["path_cap"] = args.path_cap
    try:
        cfg = load_experiment(args.config, overrides)
        _COMMANDS[args.command](cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, DegenerateWeightsError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3
    except TwistSmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
