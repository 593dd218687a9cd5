"""Command-line pipeline: phantoms, sinograms, FBP, posterior sampling, metrics.

Every command is a pure function of (config file, input files, seed), so
reruns produce byte-identical outputs. Exit codes: 0 success, 2 config
error, 3 I/O or file-format error, 4 numerical failure (divergence storm,
non-finite weights, poisoned sampler state).

The ``LATENTMC_LOG`` environment variable sets the log level.
"""

import argparse
import logging
import copy
import multiprocessing
import os
import sys

import numpy as np

from . import __version__, analysis, imageio
from .config import ConfigError, RunConfig, build_config, parse_config_file
from .forward_model import (
    ImageGrid,
    InsufficientDataError,
    PhantomSpec,
    RadonGeometry,
    ShapeError,
    Sinogram,
    add_noise,
    fbp,
    generate_phantom,
    radon,
)
from .network import (
    NetworkFormatError,
    NetworkValidationError,
    NonFiniteParameterError,
    lipschitz_bound,
    load_network,
)
from .sampler import (
    ChainFormatError,
    HmcParams,
    LatentPosterior,
    PoisonedStateError,
    RadonOperator,
    TvPosterior,
    check_ergodicity_conditions,
    load_chain,
    run_chain,
    total_variation,
)

log = logging.getLogger("latentmc")

DIVERGENCE_STORM_FRACTION = 0.5


class NumericalFailure(RuntimeError):
    """Sampling or verification failed numerically (exit code 4)."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _out_path(config, name):
    os.makedirs(config.out_dir, exist_ok=True)
    return os.path.join(config.out_dir, name)


def _write_image_pair(config, stem, values):
    imageio.write_array(_out_path(config, f"{stem}.img"), values)
    imageio.write_pgm(_out_path(config, f"{stem}.pgm"), values)


def _geometry_from(config, side, n_rows, n_cols):
    n_angles = config.geometry_angles or n_rows
    n_detectors = config.geometry_detectors or n_cols
    if (n_angles, n_detectors) != (n_rows, n_cols):
        raise ConfigError(
            f"geometry {n_angles}x{n_detectors} does not match measurement shape {n_rows}x{n_cols}"
        )
    return RadonGeometry.standard(side, n_angles=n_angles, n_detectors=n_detectors)


def _read_measurement(config):
    """Load the measurement array plus its geometry and noise sigma."""
    path = config.require_file("measurement_path", "paths.measurement")
    values = imageio.read_array(path)
    manifest = {}
    if os.path.exists(f"{path}.manifest"):
        manifest = imageio.read_manifest(f"{path}.manifest")
    side = config.geometry_side or int(manifest.get("side", 0))
    if not side:
        raise ConfigError("image side unknown: set geometry.side or provide a measurement manifest")
    geom = _geometry_from(config, side, values.shape[0], values.shape[1])
    sigma = config.sampler_sigma or float(manifest.get("sigma", 0.0))
    if sigma <= 0:
        raise ConfigError("noise sigma unknown: set sampler.sigma or provide a measurement manifest")
    return values, geom, sigma


def _hmc_params(config):
    mass = np.asarray(config.sampler_mass) if config.sampler_mass else None
    epsilon = config.sampler_epsilon if config.sampler_epsilon_set else None
    return HmcParams(
        epsilon=epsilon,
        n_leapfrog=config.sampler_leapfrog,
        beta=config.sampler_beta,
        mass=mass,
    )


def _chain_task(task):
    kind, posterior, params, n_samples, burn_in, thin, seed = task
    return run_chain(kind, posterior, params, n_samples, burn_in=burn_in, thin=thin, seed=seed)


def _run_chains(config, kind, posterior, params):
    """Run config.sampler_chains chains (parallel across workers), in order."""
    n_chains = max(1, config.sampler_chains)
    child_seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(n_chains)]
    burn_in = None if config.sampler_burn_in < 0 else config.sampler_burn_in
    tasks = [
        (kind, posterior, params, config.sampler_samples, burn_in, config.sampler_thin, child_seeds[i])
        for i in range(n_chains)
    ]
    workers = config.workers or os.cpu_count() or 1
    if n_chains > 1 and workers > 1:
        with multiprocessing.Pool(min(workers, n_chains)) as pool:
            records = pool.map(_chain_task, tasks)
    else:
        records = [_chain_task(task) for task in tasks]
    return records


def _merge_records(records):
    merged = records[0]
    if len(records) == 1:
        return merged
    merged = copy.copy(merged)
    merged.samples = np.concatenate([r.samples for r in records], axis=0)
    merged.potentials = np.concatenate([r.potentials for r in records])
    merged.accepts = np.concatenate([r.accepts for r in records])
    merged.accept_count = sum(r.accept_count for r in records)
    merged.n_proposals = sum(r.n_proposals for r in records)
    merged.divergences = sum(r.divergences for r in records)
    merged.params = dict(records[0].params, chains=str(len(records)))
    return merged


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_phantom(config):
    config.require(seed="seed")
    spec = PhantomSpec(
        image_side=config.phantom_side,
        n_features=config.phantom_features,
        seed=config.seed,
        feature_kinds=config.phantom_kinds or PhantomSpec.feature_kinds,
        placement_radius=config.phantom_radius,
    )
    image = generate_phantom(spec)
    _write_image_pair(config, "phantom", image.values)
    log.info("phantom written to %s", config.out_dir)


def cmd_sinogram(config):
    config.require(seed="seed")
    path = config.require_file("image_path", "paths.image")
    values = imageio.read_array(path)
    if values.shape[0] != values.shape[1]:
        raise ShapeError("input image must be square")
    side = values.shape[0]
    geom = RadonGeometry.standard(
        side,
        n_angles=config.geometry_angles or None,
        n_detectors=config.geometry_detectors or None,
    )
    clean = radon(ImageGrid.from_array(values), geom)
    imageio.write_array(_out_path(config, "sinogram_clean.img"), clean.values)
    base = {
        "side": str(side),
        "angles": str(geom.n_angles),
        "detectors": str(geom.n_detectors),
    }
    imageio.write_manifest(
        _out_path(config, "sinogram_clean.img.manifest"), dict(base, gamma="0", sigma="0")
    )
    noisy, sigma = add_noise(clean, config.noise_gamma, np.random.default_rng(config.seed))
    imageio.write_array(_out_path(config, "sinogram_noisy.img"), noisy.values)
    imageio.write_manifest(
        _out_path(config, "sinogram_noisy.img.manifest"),
        dict(base, gamma=repr(float(config.noise_gamma)), sigma=repr(float(sigma))),
    )
    log.info("sinograms written to %s (sigma=%g)", config.out_dir, sigma)


def cmd_fbp(config):
    values, geom, _sigma = _read_measurement(config)
    sino = Sinogram(geometry=geom, values=values)
    recon = fbp(sino, geom, filter_name=config.fbp_filter)
    _write_image_pair(config, "fbp", recon.values)
    log.info("FBP reconstruction written to %s", config.out_dir)


def _build_posterior(config, kind):
    values, geom, sigma = _read_measurement(config)
    sino = Sinogram(geometry=geom, values=values)
    if kind == "pcn-tv":
        return TvPosterior(sino, sigma=sigma, tau=config.sampler_tau), None
    weights = config.require_file("weights_path", "paths.weights")
    generator = load_network(weights)
    if generator.role != "generator":
        raise ConfigError(f"{weights}: expected a generator network, found role {generator.role!r}")
    posterior = LatentPosterior(
        RadonOperator(geom),
        generator,
        sino,
        sigma=sigma,
        phi_includes_prior=config.phi_includes_prior,
    )
    return posterior, generator


def cmd_sample(config):
    config.require(seed="seed")
    kind = config.sampler_kind
    posterior, generator = _build_posterior(config, kind)
    params = _hmc_params(config)
    records = _run_chains(config, kind, posterior, params)
    for i, record in enumerate(records):
        record.save(_out_path(config, f"chain_{i:03d}.chain"))
        record.write_diagnostics_csv(_out_path(config, f"chain_{i:03d}.csv"))
    merged = _merge_records(records)
    merged.save(_out_path(config, "chain_merged.chain"))

    if merged.n_proposals and merged.divergences > DIVERGENCE_STORM_FRACTION * merged.n_proposals:
        raise NumericalFailure(
            f"divergence storm: {merged.divergences}/{merged.n_proposals} proposals diverged"
        )

    if kind == "pcn-tv":
        side = posterior.image_side
        stack = merged.samples.reshape(-1, side, side)
        mean = stack.mean(axis=0)
        sd = stack.std(axis=0, ddof=1) if stack.shape[0] > 1 else np.zeros_like(mean)
    else:
        summary = analysis.summarize(merged, generator, alpha=0.05)
        mean, sd = summary.mean.values, summary.sd.values
    _write_image_pair(config, "mean", mean)
    _write_image_pair(config, "sd", sd)
    imageio.write_manifest(
        _out_path(config, "run.manifest"),
        {
            "kind": kind,
            "chains": str(len(records)),
            "samples_per_chain": str(config.sampler_samples),
            "acceptance_rate": repr(merged.acceptance_rate),
            "divergences": str(merged.divergences),
            "seed": str(config.seed),
            "epsilon": merged.params.get("epsilon", ""),
        },
    )
    log.info("sampling done: acceptance %.3f", merged.acceptance_rate)


def cmd_metrics(config):
    truth = imageio.read_array(config.require_file("truth_path", "paths.truth"))
    rows = []
    recon_id = "run"
    if config.reconstruction_path:
        recon_path = config.require_file("reconstruction_path", "paths.reconstruction")
        recon = imageio.read_array(recon_path)
        recon_id = os.path.splitext(os.path.basename(recon_path))[0]
        if "psnr" in config.metrics_list:
            rows.append(("psnr", recon_id, analysis.psnr(recon, truth)))
        if "ssim" in config.metrics_list:
            rows.append(("ssim", recon_id, analysis.ssim(recon, truth)))
        if "tv" in config.metrics_list:
            rows.append(("tv", recon_id, total_variation(recon)))
    if config.fbp_path:
        fbp_img = imageio.read_array(config.require_file("fbp_path", "paths.fbp"))
        if "psnr" in config.metrics_list:
            rows.append(("psnr", "fbp", analysis.psnr(fbp_img, truth)))
        if "ssim" in config.metrics_list:
            rows.append(("ssim", "fbp", analysis.ssim(fbp_img, truth)))
        if "tv" in config.metrics_list:
            rows.append(("tv", "fbp", total_variation(fbp_img)))
    if "hpdi" in config.metrics_list and config.chain_path:
        record = load_chain(config.require_file("chain_path", "paths.chain"))
        generator = load_network(config.require_file("weights_path", "paths.weights"))
        posterior_values = record.potentials
        if np.any(~np.isfinite(posterior_values)):
            values, geom, sigma = _read_measurement(config)
            post = LatentPosterior(RadonOperator(geom), generator, values, sigma=sigma)
            posterior_values = np.array([post.potential_value(z) for z in record.samples])
        log_post = -posterior_values
        for level, alpha in (("hpdi95", 0.05), ("hpdi99", 0.01)):
            coverage = analysis.hpdi_coverage(
                record, generator, log_post, truth, alpha, method=config.hpdi_method
            )
            rows.append((level, recon_id, coverage))
    if not rows:
        raise ConfigError("metrics command produced no rows; check metrics.list and input paths")
    lines = ["metric,sample_id,value"]
    for metric, sample_id, value in rows:
        lines.append(f"{metric},{sample_id},{value!r}")
    with open(_out_path(config, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    log.info("metrics written: %d rows", len(rows))


def cmd_dims(config):
    config.require(seed="seed")
    if not config.checkpoint_paths:
        raise ConfigError("paths.checkpoints must list at least one encoder weight file")
    dataset_dir = config.require_file("dataset_path", "paths.dataset")
    files = sorted(
        os.path.join(dataset_dir, f) for f in os.listdir(dataset_dir) if f.endswith(".img")
    )
    if not files:
        raise ConfigError(f"no .img files found in dataset directory {dataset_dir}")
    images = [imageio.read_array(f) for f in files]
    lines = ["checkpoint,latent_dim,trace_prior,trace_encoded,gap,verdict"]
    for index, ckpt in enumerate(config.checkpoint_paths):
        if not os.path.exists(ckpt):
            raise ConfigError(f"paths.checkpoints refers to a missing file: {ckpt}")
        encoder = load_network(ckpt)
        if encoder.role != "encoder":
            raise ConfigError(f"{ckpt}: expected an encoder network, found role {encoder.role!r}")
        encoded = np.stack([encoder.encode(img) for img in images], axis=0)
        m = encoded.shape[1]
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
        prior = rng.standard_normal((len(images), m))
        report = analysis.intrinsic_dimension(encoded, prior)
        gap = report.trace_prior - report.trace_encoded
        stem = os.path.splitext(os.path.basename(ckpt))[0]
        lines.append(
            f"{stem},{m},{report.trace_prior!r},{report.trace_encoded!r},{gap!r},{report.verdict}"
        )
        cov = report.covariance
        peak = float(np.max(np.abs(cov))) or 1.0
        _write_image_pair(config, f"cov_{stem}", 0.5 + 0.5 * cov / peak)
        imageio.write_array(_out_path(config, f"cov_{stem}_raw.img"), cov)
    with open(_out_path(config, "dims.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    log.info("dimension report written for %d checkpoints", len(config.checkpoint_paths))


def cmd_ergocheck(config):
    config.require(seed="seed")
    posterior, generator = _build_posterior(config, "latent")
    bound_report = lipschitz_bound(generator, rng=np.random.default_rng(config.seed))
    if bound_report.unbounded:
        raise NumericalFailure("no finite Lipschitz certificate for this generator")
    radius = config.ergo_radius or None
    report = check_ergodicity_conditions(
        posterior,
        bound_report.bound,
        probes=config.ergo_probes,
        radius=radius,
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 1])),
    )
    lines = [
        f"lipschitz_bound={bound_report.bound!r}",
        f"operator_norm={report.operator_norm!r}",
        f"generator_at_zero={report.generator_at_zero!r}",
        f"measurement_norm={report.measurement_norm!r}",
        f"k_growth={report.k_growth!r}",
        f"k_local={report.k_local!r}",
        f"radius={report.radius!r}",
        f"probes={report.probes}",
        f"max_growth_ratio={report.max_growth_ratio!r}",
        f"max_local_ratio={report.max_local_ratio!r}",
        f"observed_lipschitz={report.observed_lipschitz!r}",
        f"growth_violations={report.growth_violations}",
        f"local_violations={report.local_violations}",
        f"ok={report.ok}",
    ]
    lines.append("# per-layer bounds")
    for name, kind, bound, note in bound_report.per_layer:
        lines.append(f"layer {name} ({kind}): {bound!r}  [{note}]")
    for assumption in bound_report.assumptions:
        lines.append(f"# assumption: {assumption}")
    with open(_out_path(config, "ergodicity.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if not report.ok or report.observed_lipschitz > bound_report.bound:
        raise NumericalFailure(
            "ergodicity conditions violated; weights may be unnormalized or the export is broken"
        )
    log.info("ergodicity conditions verified over %d probes", report.probes)


def cmd_discrepancy(config):
    record_x = load_chain(config.require_file("chain_x_path", "paths.chain_x"))
    record_z = load_chain(config.require_file("chain_z_path", "paths.chain_z"))
    generator = load_network(config.require_file("weights_path", "paths.weights"))
    ns, chis = analysis.chain_discrepancy(record_x.samples, record_z, generator)
    lines = ["n,chi"] + [f"{n},{chi!r}" for n, chi in zip(ns, chis)]
    with open(_out_path(config, "discrepancy.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    log.info("discrepancy series written (%d points)", len(ns))


COMMANDS = {
    "phantom": cmd_phantom,
    "sinogram": cmd_sinogram,
    "fbp": cmd_fbp,
    "sample": cmd_sample,
    "metrics": cmd_metrics,
    "dims": cmd_dims,
    "ergocheck": cmd_ergocheck,
    "discrepancy": cmd_discrepancy,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latentmc",
        description="Bayesian CT reconstruction over a generative latent prior",
    )
    parser.add_argument("--version", action="version", version=f"latentmc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="key=value configuration file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--workers", type=int, default=None)
        cmd.add_argument(
            "--phi-includes-prior",
            action="store_true",
            default=None,
            help="compat: include the Gaussian prior term in the pCN acceptance potential",
        )
    return parser


def _configure_logging():
    level_name = os.environ.get("LATENTMC_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        entries = parse_config_file(args.config) if args.config else {}
        overrides = {
            "seed": args.seed,
            "out_dir": args.out,
            "workers": args.workers,
            "phi_includes_prior": args.phi_includes_prior,
        }
        config = build_config(entries, overrides)
        COMMANDS[args.command](config)
        return 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        print(f"latentmc: config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, PoisonedStateError, NonFiniteParameterError) as exc:
        log.error("numerical failure: %s", exc)
        print(f"latentmc: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (
        imageio.ContainerError,
        ChainFormatError,
        NetworkFormatError,
        NetworkValidationError,
        InsufficientDataError,
        ShapeError,
        OSError,
    ) as exc:
        log.error("I/O error: %s", exc)
        print(f"latentmc: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
