"""Experiment configuration: INI parsing, validation, hashing and seed streams.

Every section and key is declared below with its type and default; anything
else in a config file is rejected. Values with a fixed set of admissible
settings (encoding width, cluster counts, FFR cut-offs, ...) are validated
against that set.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import zlib
from dataclasses import dataclass

import numpy as np

ALLOWED_D = (128, 512, 1024)
ALLOWED_K = ("auto", 1, 10, 20, 500, 1000)
ALLOWED_CUTOFFS = (0.72, 0.74, 0.76, 0.78, 0.80, 0.85)


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _k_list(text):
    return tuple(t if t == "auto" else int(t) for t in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "seed": (int, 0),
    },
    "phantom": {
        "n_seg_train": (int, 8),
        "n_cae_train": (int, 4),
        "n_classify": (int, 60),
        "dims": (_ints, (96, 96, 48)),
        "spacing": (_floats, (0.5, 0.5, 0.9)),
        "lesion_probability": (float, 0.5),
        "contrast_delta": (float, -300.0),
        "texture_ratio": (float, 0.5),
    },
    "segmentation": {
        "filters": (_ints, (16, 32, 64)),
        "units": (int, 256),
        "drop_rate": (float, 0.5),
        "epochs": (int, 200),
        "minibatches": (int, 200),
        "batch_size": (int, 500),
        "learning_rate": (float, 0.1),
        "momentum": (float, 0.9),
        "near_distance": (float, 80.0),
        "grid_stride": (int, 5),
        "max_iters": (int, 50),
    },
    "cae": {
        "d": (int, 512),
        "epochs": (int, 750),
        "train_minibatches": (int, 200),
        "val_minibatches": (int, 20),
        "batch_size": (int, 500),
        "learning_rate": (float, 1e-5),
        "momentum": (float, 0.9),
        "patch_step": (int, 10),
        "encode_step": (int, 1),
        "mask_source": (str, "predicted"),
    },
    "clustering": {
        "k": (lambda t: _k_list(t)[0], "auto"),
        "seed": (int, 0),
    },
    "svm": {
        "c_exponents": (_ints, (-3, 7)),
        "gamma_exponents": (_ints, (-9, 1)),
        "exponent_step": (int, 1),
        "inner_folds": (int, 5),
        "tol": (float, 1e-3),
    },
    "cv": {
        "folds": (int, 10),
        "repeats": (int, 50),
        "mode": (str, "pooled"),
        "cutoff": (float, 0.78),
        "sensitivities": (_floats, (0.60, 0.70, 0.80)),
    },
    "sweep": {
        "k_values": (_k_list, (1, 10, 20, "auto")),
        "d_values": (_ints, ()),
        "cluster_seeds": (_ints, (0, 1, 2, 3)),
        "cutoffs": (_floats, (0.72, 0.74, 0.76, 0.78, 0.80, 0.85)),
    },
}


def _check(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    p, s, c, k, svm, cv, sw = (cfg["phantom"], cfg["segmentation"], cfg["cae"], cfg["clustering"],
                               cfg["svm"], cfg["cv"], cfg["sweep"])
    need(min(p["n_seg_train"], p["n_cae_train"]) >= 1 and p["n_classify"] >= 4,
         "phantom counts: need >= 1 training phantom per stage and >= 4 for classification")
    need(len(p["dims"]) == 3 and min(p["dims"]) >= 1, "phantom.dims needs three positive integers")
    need(len(p["spacing"]) == 3 and min(p["spacing"]) > 0, "phantom.spacing needs three positive values")
    need(0.0 <= p["lesion_probability"] <= 1.0, "phantom.lesion_probability must lie in [0, 1]")
    need(p["texture_ratio"] >= 0, "phantom.texture_ratio must be non-negative")
    need(len(s["filters"]) == 3 and min(s["filters"]) >= 1, "segmentation.filters needs three positive integers")
    need(0.0 <= s["drop_rate"] < 1.0, "segmentation.drop_rate must lie in [0, 1)")
    for sec, keys in (("segmentation", ("units", "epochs", "minibatches", "batch_size", "grid_stride", "max_iters")),
                      ("cae", ("epochs", "train_minibatches", "val_minibatches", "batch_size", "patch_step",
                               "encode_step"))):
        for key in keys:
            need(cfg[sec][key] >= 1, f"{sec}.{key} must be >= 1")
    for sec in ("segmentation", "cae"):
        need(cfg[sec]["learning_rate"] >= 0, f"{sec}.learning_rate must be non-negative")
        need(0.0 <= cfg[sec]["momentum"] < 1.0, f"{sec}.momentum must lie in [0, 1)")
    need(c["d"] in ALLOWED_D, f"cae.d must be one of {ALLOWED_D}")
    need(c["mask_source"] in ("predicted", "reference"), "cae.mask_source must be 'predicted' or 'reference'")
    need(k["k"] in ALLOWED_K, f"clustering.k must be one of {ALLOWED_K}")
    need(all(v in ALLOWED_K for v in sw["k_values"]), f"sweep.k_values must come from {ALLOWED_K}")
    need(all(v in ALLOWED_D for v in sw["d_values"]), f"sweep.d_values must come from {ALLOWED_D}")
    need(cv["cutoff"] in ALLOWED_CUTOFFS, f"cv.cutoff must be one of {ALLOWED_CUTOFFS}")
    need(all(v in ALLOWED_CUTOFFS for v in sw["cutoffs"]), f"sweep.cutoffs must come from {ALLOWED_CUTOFFS}")
    need(len(svm["c_exponents"]) == 2 and svm["c_exponents"][0] <= svm["c_exponents"][1],
         "svm.c_exponents needs 'low high'")
    need(len(svm["gamma_exponents"]) == 2 and svm["gamma_exponents"][0] <= svm["gamma_exponents"][1],
         "svm.gamma_exponents needs 'low high'")
    need(svm["exponent_step"] >= 1 and svm["inner_folds"] >= 2 and svm["tol"] > 0, "svm settings out of range")
    need(cv["folds"] >= 2 and cv["repeats"] >= 1, "cv.folds must be >= 2 and cv.repeats >= 1")
    need(cv["mode"] in ("pooled", "average"), "cv.mode must be 'pooled' or 'average'")
    need(all(0 < v <= 1 for v in cv["sensitivities"]), "cv.sensitivities must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    def to_dict(self):
        return {sec: {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()}
                for sec, keys in self.values.items()}

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def substream(self, name):
        """Seed sequence for a named pipeline stage, derived from the global seed."""
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(name.encode()),))

    def stage_seed(self, name):
        return int(self.substream(name).generate_state(1)[0])

    def c_grid(self):
        lo, hi = self["svm"]["c_exponents"]
        return tuple(2.0 ** e for e in range(lo, hi + 1, self["svm"]["exponent_step"]))

    def gamma_grid(self):
        lo, hi = self["svm"]["gamma_exponents"]
        return tuple(2.0 ** e for e in range(lo, hi + 1, self["svm"]["exponent_step"]))

    def with_seed(self, seed):
        values = {sec: dict(keys) for sec, keys in self.values.items()}
        values["experiment"]["seed"] = int(seed)
        return ExperimentConfig(values)


def default_config():
    return ExperimentConfig({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_config(text, source="<config>"):
    """Parse INI text; unknown sections/keys and bad values raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = default_config().values
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {sec}.{key}")
            parser = SCHEMA[sec][key][0]
            try:
                cfg[sec][key] = parser(raw.strip())
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{source}: bad value for {sec}.{key}: {raw!r}") from exc
    _check(cfg)
    return ExperimentConfig(cfg)


def load_config(path=None):
    if path is None:
        cfg = default_config()
        _check(cfg.values)
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


__all__ = [
    "ALLOWED_CUTOFFS",
    "ALLOWED_D",
    "ALLOWED_K",
    "ConfigError",
    "ExperimentConfig",
    "SCHEMA",
    "default_config",
    "load_config",
    "parse_config",
]
