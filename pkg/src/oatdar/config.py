"""Pipeline configuration: one structured JSON file, strict validation,
profile defaults, and a canonical content hash logged by every run.

Two built-in profiles: ``desk`` (32x32 grid, 16 detectors, 256 samples,
T=200 — the whole pipeline trains in about an hour on a CPU) and ``paper``
(the full-scale reference geometry and model sizes; provided for
completeness, not exercised by the test suite).
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .geometry import ImagingGeometry
from .phantoms import PhantomParams


def desk_config() -> dict:
    return {
        "profile": "desk",
        "geometry": {
            "grid_nx": 32, "grid_ny": 32, "pixel_pitch": 110e-6,
            "detector_count": 16, "ring_radius": 11e-3,
            "position_jitter_frac": 1e-3, "sound_speed": 1490.0,
            "dt": 1.0 / 24.4e6, "time_samples": 256,
            "sir_subelements": 4, "sensor_diameter": 3e-3, "jitter_seed": 0,
        },
        "phantom": {
            "n_trees": [2, 5], "branch_depth": [2, 4],
            "segment_curvature": [0.08, 0.35], "vessel_width_px": [1.2, 3.5],
            "intensity_range": [0.4, 1.0], "fill_fraction_target": [0.03, 0.16],
            "max_attempts": 20,
        },
        "schedule": {"T": 200, "beta1": 1e-4, "betaT": 0.02,
                     "sigma_mode": "beta"},
        "patch": {"h": 16, "w": 16},
        "fd_unet": {"scales": [12, 24, 48], "growth": 10,
                    "layers_per_block": 3, "seed": 100},
        "cip": {"layer_dims": [256, 192, 128, 64], "seed": 200},
        "denoiser": {"scales": [16, 32, 64], "resblocks_per_scale": 1,
                     "attention_heads": 4, "cond_dim": 64, "cond_tokens": 8,
                     "time_embed_dim": 64, "norm_groups": 8, "seed": 300},
        "training": {"learning_rate": 1e-4, "adam_beta1": 0.9,
                     "adam_beta2": 0.999, "epochs": 20, "batch_size": 16},
        "dataset": {"train": 2000, "val": 50, "test": 50,
                    "snr_db_range": [20.0, 80.0], "master_seed": 7},
        "inference": {"nis": 25, "eta": 0.0, "seed": 1234},
        "eval": {"tikhonov_lambda": 1e-2, "tikhonov_iters": 100,
                 "tikhonov_tol": 1e-8},
    }


def paper_config() -> dict:
    cfg = desk_config()
    cfg.update({
        "profile": "paper",
        "geometry": {
            "grid_nx": 128, "grid_ny": 128, "pixel_pitch": 110e-6,
            "detector_count": 36, "ring_radius": 44e-3,
            "position_jitter_frac": 1e-3, "sound_speed": 1490.0,
            "dt": 1.0 / 24.4e6, "time_samples": 1024,
            "sir_subelements": 8, "sensor_diameter": 13e-3, "jitter_seed": 0,
        },
        "schedule": {"T": 1000, "beta1": 1e-4, "betaT": 0.02,
                     "sigma_mode": "beta"},
        "patch": {"h": 64, "w": 64},
        "fd_unet": {"scales": [64, 128, 256], "growth": 16,
                    "layers_per_block": 4, "seed": 100},
        "cip": {"layer_dims": [4096, 3072, 2048, 1024], "seed": 200},
        "denoiser": {"scales": [128, 256, 512, 1024],
                     "resblocks_per_scale": 2, "attention_heads": 4,
                     "cond_dim": 1024, "cond_tokens": 16,
                     "time_embed_dim": 128, "norm_groups": 8, "seed": 300},
        "training": {"learning_rate": 1e-4, "adam_beta1": 0.9,
                     "adam_beta2": 0.999, "epochs": 200, "batch_size": 16},
        "dataset": {"train": 64000, "val": 10000, "test": 600,
                    "snr_db_range": [20.0, 80.0], "master_seed": 7},
    })
    return cfg


_PROFILES = {"desk": desk_config, "paper": paper_config}


def _merge_checked(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a section")
            out[key] = _merge_checked(base[key], val, where)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Build the effective config: profile defaults <- file <- overrides.

    Unknown keys anywhere are rejected.
    """
    file_cfg = {}
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config root must be an object")
    profile = file_cfg.get("profile", "desk")
    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = _merge_checked(_PROFILES[profile](), file_cfg)
    if overrides:
        cfg = _merge_checked(cfg, overrides)
    validate_config(cfg)
    return cfg


def apply_flag_overrides(cfg_overrides: dict, assignments: list):
    """Parse repeated ``--set section.key=value`` flags (values are JSON)."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if len(keys) < 2:
            raise ConfigError(f"--set key must be dotted (section.key): {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg_overrides
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return cfg_overrides


def validate_config(cfg: dict):
    geom = geometry_from_config(cfg)          # raises GeometryError on junk
    ph, pw = cfg["patch"]["h"], cfg["patch"]["w"]
    if geom.grid_ny % ph or geom.grid_nx % pw:
        raise ConfigError(f"patch {ph}x{pw} does not tile the "
                          f"{geom.grid_ny}x{geom.grid_nx} grid")
    PhantomParams.from_dict({**cfg["phantom"], "seed": 0})
    cip_dims = cfg["cip"]["layer_dims"]
    if cip_dims[0] != ph * pw:
        raise ConfigError(f"cip input dim {cip_dims[0]} != patch size {ph*pw}")
    if cip_dims[-1] != cfg["denoiser"]["cond_dim"]:
        raise ConfigError("cip output dim must equal denoiser cond_dim")
    n_scales = len(cfg["denoiser"]["scales"])
    if ph % (1 << (n_scales - 1)) or pw % (1 << (n_scales - 1)):
        raise ConfigError(f"patch {ph}x{pw} cannot be pooled through "
                          f"{n_scales} denoiser scales")
    sched = cfg["schedule"]
    if not (0 < sched["beta1"] <= sched["betaT"] < 1):
        raise ConfigError("schedule betas out of range")
    if sched["T"] < 1:
        raise ConfigError("schedule T must be >= 1")
    ds = cfg["dataset"]
    if min(ds["train"], ds["val"], ds["test"]) < 0 or ds["train"] < 1:
        raise ConfigError("dataset split sizes invalid")
    lo, hi = ds["snr_db_range"]
    if not lo <= hi:
        raise ConfigError("snr_db_range must be ordered")
    tr = cfg["training"]
    if tr["epochs"] < 0 or tr["batch_size"] < 1 or tr["learning_rate"] <= 0:
        raise ConfigError("training section invalid")
    inf = cfg["inference"]
    if not (1 <= inf["nis"] <= sched["T"]) or not (0.0 <= inf["eta"] <= 1.0):
        raise ConfigError("inference section invalid")


def geometry_from_config(cfg: dict) -> ImagingGeometry:
    return ImagingGeometry.from_dict(cfg["geometry"])


def phantom_params_from_config(cfg: dict, seed: int) -> PhantomParams:
    return PhantomParams.from_dict({**cfg["phantom"], "seed": seed})


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
