"""Run configuration: flat key=value files with dotted section prefixes.

Example::

    seed = 7
    sampler.kind = hmc-pcn
    sampler.samples = 20000
    sampler.epsilon = auto
    noise.gamma = 0.1
    paths.weights = runs/generator.sartnet

Unknown keys are rejected so typos cannot silently change a run.
"""

import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration."""


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_float_or_auto(text):
    if text.strip().lower() == "auto":
        return None
    return float(text)


def _parse_str_list(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_float_list(text):
    return tuple(float(part) for part in text.split(",") if part.strip())


@dataclass
class RunConfig:
    seed: int = None
    workers: int = 0  # 0 -> physical core count
    out_dir: str = "."

    weights_path: str = ""
    encoder_path: str = ""
    measurement_path: str = ""
    truth_path: str = ""
    image_path: str = ""
    reconstruction_path: str = ""
    fbp_path: str = ""
    chain_path: str = ""
    chain_x_path: str = ""
    chain_z_path: str = ""
    dataset_path: str = ""
    checkpoint_paths: tuple = ()

    geometry_side: int = 0
    geometry_angles: int = 0
    geometry_detectors: int = 0

    noise_gamma: float = 0.1

    phantom_side: int = 64
    phantom_features: int = 6
    phantom_radius: float = 0.0
    phantom_kinds: tuple = ()

    fbp_filter: str = "ramlak"

    sampler_kind: str = "hmc-pcn"
    sampler_samples: int = 1000
    sampler_burn_in: int = -1  # -1 -> default 20%
    sampler_thin: int = 1
    sampler_chains: int = 1
    sampler_epsilon: float = None
    sampler_epsilon_set: bool = False
    sampler_leapfrog: int = 10
    sampler_beta: float = 0.5
    sampler_tau: float = 10.0
    sampler_mass: tuple = ()
    sampler_sigma: float = 0.0  # 0 -> read from measurement manifest
    phi_includes_prior: bool = False

    metrics_list: tuple = ("psnr", "ssim", "hpdi")
    hpdi_method: str = "envelope"

    ergo_probes: int = 10000
    ergo_radius: float = 0.0  # 0 -> 2 sqrt(latent dim)

    def require(self, **attrs):
        for attr, label in attrs.items():
            value = getattr(self, attr)
            if value in (None, "", 0) and attr != "seed":
                raise ConfigError(f"missing required setting: {label}")
            if attr == "seed" and value is None:
                raise ConfigError("missing required setting: seed (wall-clock seeding is not allowed)")

    def require_file(self, attr, label):
        path = getattr(self, attr)
        if not path:
            raise ConfigError(f"missing required setting: {label}")
        if not os.path.exists(path):
            raise ConfigError(f"{label} refers to a missing file: {path}")
        return path


_KEYS = {
    "seed": ("seed", int),
    "workers": ("workers", int),
    "out": ("out_dir", str),
    "paths.weights": ("weights_path", str),
    "paths.encoder": ("encoder_path", str),
    "paths.measurement": ("measurement_path", str),
    "paths.truth": ("truth_path", str),
    "paths.image": ("image_path", str),
    "paths.reconstruction": ("reconstruction_path", str),
    "paths.fbp": ("fbp_path", str),
    "paths.chain": ("chain_path", str),
    "paths.chain_x": ("chain_x_path", str),
    "paths.chain_z": ("chain_z_path", str),
    "paths.dataset": ("dataset_path", str),
    "paths.checkpoints": ("checkpoint_paths", _parse_str_list),
    "geometry.side": ("geometry_side", int),
    "geometry.angles": ("geometry_angles", int),
    "geometry.detectors": ("geometry_detectors", int),
    "noise.gamma": ("noise_gamma", float),
    "phantom.side": ("phantom_side", int),
    "phantom.features": ("phantom_features", int),
    "phantom.radius": ("phantom_radius", float),
    "phantom.kinds": ("phantom_kinds", _parse_str_list),
    "fbp.filter": ("fbp_filter", str),
    "sampler.kind": ("sampler_kind", str),
    "sampler.samples": ("sampler_samples", int),
    "sampler.burn_in": ("sampler_burn_in", int),
    "sampler.thin": ("sampler_thin", int),
    "sampler.chains": ("sampler_chains", int),
    "sampler.epsilon": ("sampler_epsilon", _parse_float_or_auto),
    "sampler.leapfrog": ("sampler_leapfrog", int),
    "sampler.beta": ("sampler_beta", float),
    "sampler.tau": ("sampler_tau", float),
    "sampler.mass": ("sampler_mass", _parse_float_list),
    "sampler.sigma": ("sampler_sigma", float),
    "sampler.phi_includes_prior": ("phi_includes_prior", _parse_bool),
    "metrics.list": ("metrics_list", _parse_str_list),
    "metrics.hpdi_method": ("hpdi_method", str),
    "ergo.probes": ("ergo_probes", int),
    "ergo.radius": ("ergo_radius", float),
}


def parse_config_file(path):
    """Read key=value lines; '#' starts a comment, blanks are skipped."""
    entries = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key in entries:
                    raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
                entries[key] = value
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return entries


def build_config(entries, overrides=None):
    """Turn raw key=value entries (plus CLI overrides) into a RunConfig."""
    config = RunConfig()
    for key, value in entries.items():
        spec = _KEYS.get(key)
        if spec is None:
            raise ConfigError(f"unknown configuration key {key!r}")
        attr, parser = spec
        try:
            parsed = parser(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key!r}: {value!r} ({exc})") from exc
        setattr(config, attr, parsed)
        if key == "sampler.epsilon":
            config.sampler_epsilon_set = True
    for attr, value in (overrides or {}).items():
        if value is not None:
            if attr not in {f.name for f in fields(RunConfig)}:
                raise ConfigError(f"unknown override {attr!r}")
            setattr(config, attr, value)
    return config
