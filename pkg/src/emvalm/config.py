"""Run configuration: schema validation, defaults, manifests.

A run config is a JSON object with ``market``, ``problem``, ``training`` and
``evaluation`` sections.  Every default that fills a gap left open by the
model description is resolved here and echoed into the run manifest, so two
runs with identical manifests are identical runs.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .closed_form import ProblemSpec
from .market import MarketModel, market_from_dict, market_to_dict
from .rl import Hyperparams


def default_config() -> dict:
    """The reference two-regime daily configuration."""
    return {
        "market": {
            "P11": 0.9986,
            "P12": 0.0014,
            "P21": 0.0114,
            "P22": 0.9886,
            "p_hat_0": 0.3,
            "dt": 1.0 / 252.0,
            "e0": {
                "regime1": {"kind": "constant", "annual_mean": 1.2, "mean_is_gross": True},
                "regime2": {"kind": "constant", "annual_mean": 1.05, "mean_is_gross": True},
            },
            "e1": {
                "regime1": {
                    "kind": "skewed_t",
                    "annual_mean": 0.5,
                    "annual_vol": 0.2,
                    "dof": 10,
                    "skew": 0.1,
                    "mean_is_gross": False,
                },
                "regime2": {
                    "kind": "skewed_t",
                    "annual_mean": 0.06,
                    "annual_vol": 0.3,
                    "dof": 10,
                    "skew": 0.1,
                    "mean_is_gross": False,
                },
            },
            "q": {
                "regime1": {
                    "kind": "normal",
                    "annual_mean": 0.05,
                    "annual_vol": 0.1,
                    "mean_is_gross": False,
                    "vol_is_variance": False,
                },
                "regime2": {
                    "kind": "normal",
                    "annual_mean": 0.01,
                    "annual_vol": 0.2,
                    "mean_is_gross": False,
                    "vol_is_variance": False,
                },
            },
        },
        "problem": {"T_years": 10.0, "d": 8.0, "lambda": 2.0, "x0": 1.0, "l0": 0.1, "w": 8.0},
        "training": {
            "algo": "poemv1",
            "n_iter": 10_000,
            "N": 10,
            "alpha": 1e-2,
            "eta_theta": 1e-12,
            "eta_vartheta": 1e-12,
            "eta_psi": 1e-9,
            "eta_phi": 1e-9,
            "m": 2,
            "batch_size": 1,
            "grad_clip": 1e6,
            "w0": None,
            "expectation_signal": "expected_state",
            "seed": 0,
        },
        "evaluation": {"n_paths": 1000, "dynamics": "auto", "signal": None, "explore": True},
    }


_SECTION_KEYS = {
    "problem": {"T_years", "d", "lambda", "x0", "l0", "w"},
    "training": {
        "algo",
        "n_iter",
        "N",
        "alpha",
        "eta_theta",
        "eta_vartheta",
        "eta_psi",
        "eta_phi",
        "m",
        "batch_size",
        "grad_clip",
        "w0",
        "expectation_signal",
        "seed",
    },
    "evaluation": {"n_paths", "dynamics", "signal", "explore"},
}


def resolve_config(overrides: dict | None) -> dict:
    """Merge user overrides into the defaults and validate the result."""
    cfg = default_config()
    if overrides:
        if not isinstance(overrides, dict):
            raise ValueError("config must be a JSON object")
        unknown = set(overrides) - {"market", "problem", "training", "evaluation"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        for section, values in overrides.items():
            if not isinstance(values, dict):
                raise ValueError(f"config section {section!r} must be an object")
            if section == "market":
                cfg["market"] = copy.deepcopy(values)  # the market block is taken whole
            else:
                bad = set(values) - _SECTION_KEYS[section]
                if bad:
                    raise ValueError(f"unknown keys in config section {section!r}: {sorted(bad)}")
                cfg[section].update(values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    build_market(cfg)
    spec = build_problem(cfg)
    build_hyper(cfg)
    ev = cfg["evaluation"]
    if ev["dynamics"] not in ("auto", "real", "filtered", "expectation"):
        raise ValueError(f"evaluation.dynamics {ev['dynamics']!r} is not recognized")
    if ev["n_paths"] < 2:
        raise ValueError("evaluation.n_paths must be >= 2")
    if spec.horizon < 1:
        raise ValueError("problem horizon must cover at least one period")


def build_market(cfg: dict) -> MarketModel:
    return market_from_dict(cfg["market"])


def build_problem(cfg: dict) -> ProblemSpec:
    p = cfg["problem"]
    dt = cfg["market"]["dt"]
    periods = p["T_years"] / dt
    if abs(periods - round(periods)) > 1e-9:
        raise ValueError("T_years must be a whole number of periods at the market dt")
    return ProblemSpec(
        horizon=int(round(periods)),
        target=p["d"],
        multiplier=p.get("w", p["d"]),
        explore_weight=p["lambda"],
        x0=p["x0"],
        l0=p["l0"],
    )


def build_hyper(cfg: dict, seed: int | None = None) -> Hyperparams:
    t = cfg["training"]
    return Hyperparams(
        eta_theta=t["eta_theta"],
        eta_vartheta=t["eta_vartheta"],
        eta_psi=t["eta_psi"],
        eta_phi=t["eta_phi"],
        alpha=t["alpha"],
        n_avg=t["N"],
        n_iter=t["n_iter"],
        dt=cfg["market"]["dt"],
        seed=t["seed"] if seed is None else seed,
        m=t["m"],
        batch_size=t["batch_size"],
        grad_clip=t["grad_clip"],
        w0=t["w0"],
        expectation_signal=t["expectation_signal"],
    )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def manifest(cfg: dict, command: str, extra: dict | None = None) -> dict:
    out = {"command": command, "config": cfg, "config_digest": config_digest(cfg)}
    if extra:
        out.update(extra)
    return out


def market_section(model: MarketModel) -> dict:
    return market_to_dict(model)
