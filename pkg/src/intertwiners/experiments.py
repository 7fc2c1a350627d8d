"""Desk-scale experiments driven by JSON configs.

Each experiment takes a plain dict (missing keys fall back to the defaults
below) and returns result rows; the CLI writes them to CSV/JSON.
"""
from __future__ import annotations

import copy

import numpy as np

from . import metrics, numerics, stitching, trainer
from .errors import ConfigError, NumericalError
from .intertwiner import to_matrix
from .network import (NetworkSpec, act_on_weights, equalize_residual, forward_upto, init_weights,
                      random_assignment, residual_failure_demo, transport)

EXPERIMENTS = ("min-stitch", "rotation-penalty", "residual-failure", "metric-grid")

_TASK = {"data": "teacher", "teacher_hidden": [8], "teacher_seed": 0, "n_train": 8000, "n_val": 2000, "data_seed": 1}

DEFAULTS = {
    "min-stitch": {
        **_TASK,
        "dims": [4, 32, 32, 32, 10], "activation": "relu", "batchnorm": False,
        "model_seed": 2, "train": {"epochs": 30, "learning_rate": 0.005},
        "layer": 3, "seeds": [0, 1, 2, 3, 4], "variants": ["full", "grelu"],
        "stitch": {"epochs": 40, "head_start_epochs": 10, "lr": 0.003, "lr_drops": 2, "lr_drop_factor": 0.1},
    },
    "rotation-penalty": {
        **_TASK,
        "dims": [4, 32, 32, 32, 10], "activation": "relu",
        "model_seed": 2, "train": {}, "finetune": {},
        "layer": 2, "seeds": [0, 1, 2, 3, 4], "transforms": ["identity", "g_relu", "orthogonal"],
    },
    "residual-failure": {
        **_TASK,
        "dims": [4, 32, 32, 32, 32, 10], "activation": "relu", "residual": [2, 4],
        "model_seed": 2, "train": {"epochs": 30, "learning_rate": 0.005},
        "trials": 20, "n_samples": 1000,
    },
    "metric-grid": {
        **_TASK, "n_train": 4000, "n_val": 500,
        "dims": [4, 32, 32, 32, 10], "activation": "relu", "batchnorm": True,
        "model_seeds": [2, 3], "train": {"epochs": 20, "learning_rate": 0.005},
        "layers": [1, 2, 3], "metrics": list(metrics.METRICS), "n_features": 500,
    },
}


def resolve_config(name: str, cfg: dict | None) -> dict:
    """Defaults for ``name`` overlaid with ``cfg``; unknown keys are rejected."""
    if name not in DEFAULTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    out = copy.deepcopy(DEFAULTS[name])
    for key, value in (cfg or {}).items():
        if key not in out:
            raise ConfigError(f"experiment {name}: unknown config key {key!r}")
        out[key] = value
    return out


def _task(cfg, classes):
    n0 = cfg["dims"][0]
    teacher = None
    if cfg["data"] == "teacher":
        teacher = trainer.teacher_network(n0, classes, numerics.make_rng(cfg["teacher_seed"]),
                                          tuple(cfg["teacher_hidden"]))
    return trainer.synth_split(cfg["data"], n0, classes, cfg["n_train"], cfg["n_val"], cfg["data_seed"], teacher)


def _spec(cfg, **extra):
    res = cfg.get("residual") or ()
    return NetworkSpec(cfg["dims"], cfg["activation"], cfg.get("batchnorm", False), tuple(res), **extra)


def _train(spec, tr, va, train_cfg: dict, seed: int):
    tcfg = trainer.TrainConfig.from_dict({**train_cfg, "seed": seed})
    w, _ = trainer.train(spec, init_weights(spec, numerics.make_rng(seed)), tr, tcfg, va)
    return w


def exact_stitch_layer(spec: NetworkSpec, ga, l: int) -> stitching.StitchLayer:
    """The map ``phi(A_l)`` as a stitching layer (GRelu when monomial with positive scales)."""
    t = to_matrix(transport(spec, ga, l))
    cols = np.count_nonzero(t, axis=0)
    if np.all(cols == 1) and np.all(t >= 0):
        q = np.argmax(t, axis=1)
        return stitching.GRelu(stitching.permutation_matrix(q), t.max(axis=0), thresholded=q)
    return stitching.FullAffine(t)


def min_stitch(cfg: dict | None = None) -> list:
    """Stitch ``f`` into ``f~ = A . f`` with the injected and the learned maps.

    One row per (seed, variant); ``variant == "injected"`` uses ``phi(A_l)``.
    """
    cfg = resolve_config("min-stitch", cfg)
    spec = _spec(cfg)
    tr, va = _task(cfg, spec.dims[-1])
    w = _train(spec, tr, va, cfg["train"], cfg["model_seed"])
    f = (spec, w)
    l = cfg["layer"]
    scfg = stitching.StitchConfig.from_dict(cfg["stitch"])
    rows = []
    for seed in cfg["seeds"]:
        ga = random_assignment(spec, numerics.make_rng(1000 + seed))
        g = (spec, act_on_weights(spec, w, ga))
        st = stitching.Stitched(spec, w, spec, g[1], l, exact_stitch_layer(spec, ga, l))
        _, acc_f = trainer.evaluate(spec, w, va)
        _, acc_g = trainer.evaluate(spec, g[1], va)
        _, acc_s = st.evaluate(va)
        rows.append({"layer": l, "variant": "injected", "seed": seed,
                     "penalty": 100.0 * (0.5 * (acc_f + acc_g) - acc_s),
                     "acc_f": acc_f, "acc_g": acc_g, "acc_stitched": acc_s})
        for variant in cfg["variants"]:
            res = stitching.stitch_pipeline(f, g, l, variant, tr, va, scfg, seed)
            rows.append(res.row())
    return rows


def rotation_penalty(cfg: dict | None = None):
    """Fine-tuning penalty after transforming one pre-activation.

    Returns ``(rows, summary)``: one row per (seed, transform) and the mean
    penalty per transform.
    """
    cfg = resolve_config("rotation-penalty", cfg)
    spec = _spec(cfg)
    tr, va = _task(cfg, spec.dims[-1])
    w = _train(spec, tr, va, cfg["train"], cfg["model_seed"])
    rows = []
    for seed in cfg["seeds"]:
        ft = trainer.TrainConfig.from_dict({**cfg["finetune"], "seed": seed})
        for t in cfg["transforms"]:
            res = trainer.rotation_penalty_experiment(spec, tr, cfg["layer"], t, ft, numerics.make_rng(seed),
                                                      va, w_base=w)
            rows.append({"seed": seed, "transform": t, "penalty": res.penalty, "baseline_acc": res.baseline_acc,
                         "transformed_acc": res.transformed_acc, "finetuned_acc": res.finetuned_acc})
    summary = [{"transform": t, "mean_penalty": float(np.mean([r["penalty"] for r in rows if r["transform"] == t]))}
               for t in cfg["transforms"]]
    return rows, summary


def residual_failure(cfg: dict | None = None) -> dict:
    """Both halves of the residual dichotomy on one trained residual MLP.

    Per trial a random assignment with unequal residual elements is drawn.
    Reported per trial: the functional deviation under that assignment and
    under its equalized twin, and the stitching penalty with the exact map
    at an in-block layer and at a residual connection layer.
    """
    cfg = resolve_config("residual-failure", cfg)
    spec = _spec(cfg)
    if len(spec.residual) < 2:
        raise ConfigError("residual-failure needs at least two residual layers")
    inside = [m for m in range(1, spec.depth) if spec.in_block(m)]
    if not inside:
        raise ConfigError("residual-failure needs a layer strictly inside a residual block")
    tr, va = _task(cfg, spec.dims[-1])
    w = _train(spec, tr, va, cfg["train"], cfg["model_seed"])
    m, r = inside[0], spec.residual[0]
    _, acc_f = trainer.evaluate(spec, w, va)
    trials = []
    for t in range(cfg["trials"]):
        rng = numerics.make_rng(5000 + t)
        ga = unequal_assignment(spec, rng)
        rep = residual_failure_demo(spec, w, ga, cfg["n_samples"], rng)
        good = equalize_residual(spec, ga)
        w2 = act_on_weights(spec, w, good)
        pens = {}
        for name, layer in (("in_block", m), ("at_connection", r)):
            st = stitching.Stitched(spec, w, spec, w2, layer, exact_stitch_layer(spec, good, layer),
                                    allow_in_block=True)
            _, acc_s = st.evaluate(va)
            pens[name] = 100.0 * (acc_f - acc_s)
        trials.append({"trial": t, "unequal_deviation": rep.unequal_deviation,
                       "equal_deviation": rep.equal_deviation, "in_block_layer": m,
                       "in_block_penalty": pens["in_block"], "connection_layer": r,
                       "connection_penalty": pens["at_connection"]})
    return {"baseline_acc": acc_f, "trials": trials}


def unequal_assignment(spec: NetworkSpec, rng: np.random.Generator):
    """A random assignment whose residual layers carry different elements."""
    ga = random_assignment(spec, rng)
    for r in spec.residual[1:]:
        other = random_assignment(spec, rng)
        ga.elements[r - 1] = other.elements[r - 1]
        ga.scales[r - 1] = other.scales[r - 1]
    return ga


def metric_grid(cfg: dict | None = None) -> dict:
    """Layer x layer similarity of two independently trained networks.

    Returns ``{metric: matrix}`` with rows indexed by layers of the first
    network and columns by layers of the second. Cells are NaN when widths
    differ (Procrustes) or a layer has a dead unit on the probe inputs.
    """
    cfg = resolve_config("metric-grid", cfg)
    spec = _spec(cfg)
    tr, va = _task(cfg, spec.dims[-1])
    s1, s2 = cfg["model_seeds"]
    w1 = _train(spec, tr, va, cfg["train"], s1)
    w2 = _train(spec, tr, va, cfg["train"], s2)
    x = va.inputs[:cfg["n_features"]]
    layers = cfg["layers"]
    feats1 = {l: forward_upto(spec, w1, x, l) for l in layers}
    feats2 = {l: forward_upto(spec, w2, x, l) for l in layers}
    out = {}
    for name in cfg["metrics"]:
        grid = np.zeros((len(layers), len(layers)))
        for i, a in enumerate(layers):
            for j, b in enumerate(layers):
                if name.endswith("procrustes") and spec.dims[a] != spec.dims[b]:
                    grid[i, j] = np.nan
                    continue
                try:
                    grid[i, j] = metrics.compute(name, feats1[a], feats2[b])
                except NumericalError:
                    # dead units leave zero columns that cannot be normalized
                    grid[i, j] = np.nan
        out[name] = grid
    return out
