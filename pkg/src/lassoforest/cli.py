"""Command-line entry point.

Subcommands: ``fit``, ``predict``, ``importance``, and ``experiment <kind>``.
Configs are strict JSON: unknown keys are rejected so typos in experiment
definitions fail loudly instead of silently using defaults. Every output file
carries a provenance block (artifact version, config hash, master seed) and
output names embed the config hash and seed, so re-running the same
configuration rewrites byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from typing import Any, Optional

import numpy as np

from . import __version__
from .core import (
    SIGNAL_COLUMN,
    Dataset,
    derive_stream,
    read_dataset_csv,
    read_features_csv,
)
from .ensemble import (
    FitConfig,
    fit_lassoed,
    fit_post_selection,
    model_from_json,
    model_to_json,
    predict_lassoed_rows,
    variable_importance,
)
from .experiments import (
    FixedSupportDgpConfig,
    PolyDgpConfig,
    SweepConfig,
    TreeDgpConfig,
    bias_variance_decomposition,
    error_estimate_accuracy,
    importance_recovery,
    snr_sweep,
)
from .forest import TreeParams
from .theory import (
    GaussianOracleConfig,
    gaussian_oracle_mc,
    implied_theory_params,
    learner_scaling_mc,
    min_norm_mse_limit,
    min_norm_oracle_mc,
    mse_ada_formula,
    mse_mean_formula,
    mse_reg_formula,
)

EXPERIMENT_KINDS = ("sweep", "decompose", "error-acc", "importance", "theory")


class ConfigError(ValueError):
    pass


def _require_keys(obj: dict, allowed: set[str], context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")


def _build_tree_params(obj: dict) -> TreeParams:
    _require_keys(obj, {"mtry", "min_node_size", "max_leaf_nodes"}, "tree_params")
    return TreeParams(**obj)


_FIT_KEYS = {
    "n_trees", "tree_params", "theta_grid", "cv_folds", "n_lambda",
    "lambda_min_ratio", "lambda_rule", "penalize_intercept",
    "standardize_response", "cross_fit", "split_fraction", "theta0_error",
}


def _build_fit_config(obj: dict, seed: int, n_workers: int = 1) -> FitConfig:
    _require_keys(obj, _FIT_KEYS, "fit")
    kwargs = dict(obj)
    if "tree_params" in kwargs:
        kwargs["tree_params"] = _build_tree_params(kwargs["tree_params"])
    if "theta_grid" in kwargs:
        kwargs["theta_grid"] = tuple(kwargs["theta_grid"])
    return FitConfig(seed=seed, n_workers=n_workers, **kwargs)


def _build_dgp(obj: dict):
    _require_keys(
        obj, {"kind", "n", "p", "c", "pi", "rho", "support", "coef"}, "dgp"
    )
    kind = obj.get("kind")
    rest = {k: v for k, v in obj.items() if k != "kind"}
    if kind == "polynomial":
        return PolyDgpConfig(**rest)
    if kind == "tree_ensemble":
        return TreeDgpConfig(**rest)
    if kind == "fixed_support":
        return FixedSupportDgpConfig(**rest)
    raise ConfigError(f"dgp.kind must be one of polynomial|tree_ensemble|fixed_support, got {kind!r}")


def _build_sweep_config(obj: dict, seed: int, n_workers: int) -> SweepConfig:
    _require_keys(obj, {"dgp", "snr_grid", "replications", "fit", "test_size"}, "experiment config")
    fit = _build_fit_config(obj.get("fit", {}), seed=seed, n_workers=1)
    return SweepConfig(
        dgp=_build_dgp(obj["dgp"]),
        snr_grid=tuple(obj["snr_grid"]),
        replications=int(obj["replications"]),
        fit=fit,
        test_size=int(obj.get("test_size", 1000)),
    )


def _config_hash(obj: Any) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(canon).hexdigest()[:12]


def _provenance(cfg_hash: str, seed: int) -> dict:
    return {"artifact_version": __version__, "config_sha256": cfg_hash, "master_seed": seed}


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_csv(path: str, rows: list[dict], provenance: dict) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in sorted(provenance.items()):
            fh.write(f"# {k}={v}\n")
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    return obj


def cmd_fit(args: argparse.Namespace) -> int:
    cfg_obj = _load_config(args.config)
    _require_keys(cfg_obj, {"estimator", "fit", "holdout_fraction"}, "fit config")
    estimator = cfg_obj.get("estimator", "lassoed")
    if estimator not in ("vanilla", "post_selection", "lassoed"):
        raise ConfigError(f"estimator must be vanilla|post_selection|lassoed, got {estimator!r}")
    fit_cfg = _build_fit_config(cfg_obj.get("fit", {}), seed=args.seed, n_workers=args.workers)
    data = read_dataset_csv(args.dataset, args.response_column)

    holdout = float(cfg_obj.get("holdout_fraction", 0.0))
    if not 0.0 <= holdout < 1.0:
        raise ConfigError("holdout_fraction must be in [0, 1)")
    test: Optional[Dataset] = None
    if holdout > 0.0:
        perm = derive_stream(args.seed, 2**32).generator().permutation(data.n_rows)
        n_test = max(1, int(round(holdout * data.n_rows)))
        if data.n_rows - n_test < 4:
            raise ConfigError("holdout leaves too few training rows")
        test = data.subset(np.sort(perm[:n_test]))
        data = data.subset(np.sort(perm[n_test:]))

    if estimator == "vanilla":
        fit_cfg = _replace_grid(fit_cfg, (0.0,))
    elif estimator == "post_selection":
        fit_cfg = _replace_grid(fit_cfg, (1.0,))
    model = fit_lassoed(data, fit_cfg) if estimator != "post_selection" else fit_post_selection(data, fit_cfg)

    os.makedirs(args.out, exist_ok=True)
    cfg_hash = _config_hash({"config": cfg_obj, "seed": args.seed, "response": args.response_column})
    model_path = os.path.join(args.out, f"model_{cfg_hash}_{args.seed}.json")
    doc = json.loads(model_to_json(model))
    doc["provenance"] = _provenance(cfg_hash, args.seed)
    _write_json(model_path, doc)
    print(f"wrote {model_path}")
    print(f"theta_hat={model.theta_hat} lambda_hat={model.lambda_hat}")
    if test is not None:
        mse = float(np.mean((test.response - predict_lassoed_rows(model, test.features)) ** 2))
        print(f"holdout_mse={mse}")
    return 0


def _replace_grid(cfg: FitConfig, grid: tuple[float, ...]) -> FitConfig:
    from dataclasses import replace

    return replace(cfg, theta_grid=grid)


def _load_model(path: str):
    with open(path) as fh:
        doc = json.load(fh)
    doc.pop("provenance", None)
    return model_from_json(json.dumps(doc))


def cmd_predict(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    X, _names = read_features_csv(args.dataset)
    if X.shape[0] > 0 and X.shape[1] != model.forest.n_features:
        print(
            f"error: model expects {model.forest.n_features} features, data has {X.shape[1]}",
            file=sys.stderr,
        )
        return 1
    preds = predict_lassoed_rows(model, X) if X.shape[0] else np.empty(0)
    out_path = args.out
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prediction"])
        for v in preds:
            writer.writerow([repr(float(v))])
    print(f"wrote {out_path}")
    return 0


def cmd_importance(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    imp = variable_importance(model, absolute=args.absolute)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "kappa"])
        for j, v in enumerate(imp.kappa):
            writer.writerow([j, repr(float(v))])
    print(f"wrote {args.out}")
    return 0


def _theory_records(cfg_obj: dict, seed: int) -> list[dict]:
    _require_keys(
        cfg_obj,
        {"W_scale", "J", "N", "sigma", "trials", "test_points", "theta_grid",
         "eta", "min_norm", "scaling"},
        "theory config",
    )
    rng = derive_stream(seed, 0)
    records: list[dict] = []
    if cfg_obj.get("J") is not None:
        J = int(cfg_obj["J"])
        eta = float(cfg_obj.get("eta", 0.0))
        W = float(cfg_obj.get("W_scale", 1.0)) * np.eye(J)
        Gamma = np.concatenate([[-eta], np.full(J, 1.0 / J)])
        oracle_cfg = GaussianOracleConfig(
            W=W, Gamma=Gamma, N=int(cfg_obj["N"]), sigma=float(cfg_obj.get("sigma", 1.0)),
            trials=int(cfg_obj.get("trials", 500)),
            test_points=int(cfg_obj.get("test_points", 100)),
        )
        params = implied_theory_params(oracle_cfg)
        for i, theta in enumerate(cfg_obj.get("theta_grid", [0.0, 0.5, 1.0])):
            res = gaussian_oracle_mc(oracle_cfg, float(theta), rng.child(i))
            records.append(
                {
                    "quantity": "blend_error",
                    "theta": float(theta),
                    "params": asdict(params),
                    "formula_value": mse_ada_formula(params, float(theta)),
                    "mc_value": res.mse_ada.value,
                    "mc_se": res.mse_ada.se,
                }
            )
        res0 = gaussian_oracle_mc(oracle_cfg, 0.0, rng.child(1000))
        records.append(
            {"quantity": "mean_error", "params": asdict(params),
             "formula_value": mse_mean_formula(params),
             "mc_value": res0.mse_mean.value, "mc_se": res0.mse_mean.se}
        )
        records.append(
            {"quantity": "reg_error", "params": asdict(params),
             "formula_value": mse_reg_formula(params),
             "mc_value": res0.mse_reg.value, "mc_se": res0.mse_reg.se}
        )
    mn = cfg_obj.get("min_norm")
    if mn:
        _require_keys(mn, {"J", "N", "sigma2", "trials"}, "theory.min_norm")
        est = min_norm_oracle_mc(
            J=int(mn["J"]), N=int(mn["N"]), sigma2=float(mn["sigma2"]),
            trials=int(mn.get("trials", 500)), rng=rng.child(2000),
        )
        r = mn["J"] / mn["N"]
        records.append(
            {"quantity": "min_norm_error", "params": {"r": r, "sigma2": mn["sigma2"]},
             "formula_value": min_norm_mse_limit(r, float(mn["sigma2"])),
             "mc_value": est.value, "mc_se": est.se}
        )
    sc = cfg_obj.get("scaling")
    if sc:
        _require_keys(sc, {"mode", "s_grid"}, "theory.scaling")
        res = learner_scaling_mc(sc["mode"], np.asarray(sc["s_grid"], dtype=float), rng.child(3000))
        records.append(
            {"quantity": "learner_scaling", "params": {"mode": sc["mode"], "s_grid": list(sc["s_grid"])},
             "formula_value": None,
             "mc_value": {"psi": res.psi.tolist(), "omega": res.omega.tolist(),
                          "slope_psi_raw": res.slope_psi_raw,
                          "slope_psi_vs_noise": res.slope_psi_vs_noise},
             "mc_se": None}
        )
    return records


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg_obj = _load_config(args.config)
    kind = args.kind
    cfg_hash = _config_hash({"config": cfg_obj, "seed": args.seed, "kind": kind})
    prov = _provenance(cfg_hash, args.seed)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"{kind.replace('-', '_')}_{cfg_hash}_{args.seed}")
    rng = derive_stream(args.seed, 0)

    if kind == "theory":
        records = _theory_records(cfg_obj, args.seed)
        _write_json(base + ".json", {"provenance": prov, "records": records})
        print(f"wrote {base}.json")
        return 0

    sweep_cfg = _build_sweep_config(cfg_obj, seed=args.seed, n_workers=args.workers)
    if kind == "sweep":
        report = snr_sweep(sweep_cfg, rng, n_workers=args.workers)
        rows = report.to_rows()
        summary = {
            "mean_mse": {m: report.mean_mse(m).tolist() for m in ("vanilla", "post_selection", "lassoed")},
            "snr_grid": list(sweep_cfg.snr_grid),
        }
    elif kind == "decompose":
        report = bias_variance_decomposition(sweep_cfg, rng, n_workers=args.workers)
        rows = report.to_rows()
        summary = {"cells": rows}
    elif kind == "error-acc":
        report = error_estimate_accuracy(sweep_cfg, rng, n_workers=args.workers)
        rows = report.to_rows()
        summary = {"sign_agreement": {repr(k): v for k, v in report.sign_agreement.items()}}
    elif kind == "importance":
        report = importance_recovery(sweep_cfg, rng, n_workers=args.workers)
        rows = report.to_rows()
        summary = {
            "mean_recovery": {
                m: {repr(s): report.mean_recovery(m, s) for s in sweep_cfg.snr_grid}
                for m in ("vanilla", "post_selection", "lassoed")
            }
        }
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown experiment kind {kind!r}")

    _write_csv(base + ".csv", rows, prov)
    _write_json(base + ".json", {"provenance": prov, "summary": summary})
    print(f"wrote {base}.csv")
    print(f"wrote {base}.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lassoforest",
        description="Random forests with adaptive lasso re-weighting of trees",
    )
    parser.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker threads; results do not depend on this")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit an estimator to a CSV dataset")
    p_fit.add_argument("dataset")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--response-column", default="response")
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="predict with a fitted model file")
    p_pred.add_argument("model")
    p_pred.add_argument("dataset")
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_imp = sub.add_parser("importance", help="write per-feature importance")
    p_imp.add_argument("model")
    p_imp.add_argument("--out", required=True)
    p_imp.add_argument("--absolute", action="store_true")
    p_imp.set_defaults(func=cmd_importance)

    p_exp = sub.add_parser("experiment", help="run a simulation or theory pipeline")
    p_exp.add_argument("kind", choices=EXPERIMENT_KINDS)
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
