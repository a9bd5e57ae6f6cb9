"""Command-line entry point.

    ganprior <task> --config run.json [--set key=value]... [--threads N] [--seed S] --out DIR

Tasks: gen-data, train, infer, map, oracle, active, ood, validate-prior.
The config is JSON; ``--set a.b=v`` overrides a nested key (``v`` is parsed
as JSON, falling back to a plain string).  Every run writes
``manifest.json`` listing the config hash, package version, seed and every
file written.  Failures print one JSON line on stderr and exit with 2
(config), 3 (numeric) or 4 (I/O or format).
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, hmc, nets
from .active import run_active
from .artifacts import read_f64, write_f64, write_field_image
from .errors import ConfigError, FormatError, GanPriorError, NumericError
from .forward_ops import HeatOperator, HeatParams, IdentityOperator, Mask, RestrictionOperator
from .gan import TrainConfig, train
from .map_opt import GaussianPriorConfig, MapConfig, gaussian_map, latent_map
from .posterior import LatentPosterior, NoiseModel, validate_prior
from .stats import ItemResult, calibrate_rules, eval_ood_suite, summarize, write_metrics_csv
from .utils import child_seed

log = logging.getLogger(__name__)

TASKS = ("gen-data", "train", "infer", "map", "oracle", "active", "ood", "validate-prior")

# config keys that name input files; checked before any work starts
PATH_KEYS = {
    "train": ["dataset.path"],
    "infer": ["nets.generator", "measurement.path|measurement.truth"],
    "map": ["nets.generator", "measurement.path|measurement.truth"],
    "oracle": ["measurement.path|measurement.truth"],
    "active": ["nets.generator", "dataset.path"],
    "ood": ["nets.generator", "dataset.path", "dataset.calibration", "dataset.ood"],
    "validate-prior": ["nets.generator", "dataset.path"],
}


# ---------------------------------------------------------------------------
# configuration


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg, dotted, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {p} is not a section", key=dotted)
    node[parts[-1]] = value


def get_key(cfg, dotted, default=None):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node


def load_config(path, overrides=()):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", key="config") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", key="config") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object", key="config")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), parse_value(value))
    return cfg


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def check_paths(task, cfg, base):
    for spec in PATH_KEYS.get(task, []):
        options = spec.split("|")
        present = [k for k in options if get_key(cfg, k) is not None]
        if not present:
            raise ConfigError(f"missing required path {options[0]}", key=options[0])
        for key in present:
            if not resolve(base, get_key(cfg, key)).exists():
                raise ConfigError(f"path not found: {get_key(cfg, key)}", key=key)


def resolve(base, path):
    p = Path(path)
    return p if p.is_absolute() else base / p


def section(cfg, name, cls, **extra):
    """Dataclass from a config section; unknown keys are config errors."""
    values = dict(get_key(cfg, name, {}) or {})
    values.update(extra)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}", key=f"{name}.{unknown[0]}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad [{name}] section: {exc}", key=name) from exc


# ---------------------------------------------------------------------------
# run context


class Run:
    def __init__(self, task, cfg, out, seed, threads, base):
        self.task = task
        self.cfg = cfg
        self.out = Path(out)
        self.seed = seed
        self.threads = threads
        self.base = base
        self.files = []
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, key):
        return resolve(self.base, get_key(self.cfg, key))

    def add(self, paths):
        self.files.extend(Path(p) for p in (paths if isinstance(paths, list) else [paths]))

    def image(self, field, name, shape=None):
        self.add(write_field_image(field, self.out / name, shape))

    def f64(self, values, name):
        p = self.out / name
        write_f64(p, values)
        self.add(p)

    def json(self, obj, name):
        p = self.out / name
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.add(p)

    def manifest(self):
        files = sorted({str(p.relative_to(self.out)) for p in self.files})
        manifest = {
            "task": self.task,
            "version": __version__,
            "seed": self.seed,
            "config_hash": config_hash(self.cfg),
            "threads": self.threads,
            "files": files,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return manifest


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _load_generator(run):
    return nets.load(run.path("nets.generator"))


def _decode(cfg):
    return float(get_key(cfg, "decode.scale", 1.0)), float(get_key(cfg, "decode.shift", 0.0))


def _heat(cfg):
    """Heat operator from the [forward] section; ``dense`` (default true)
    assembles the matrix once so repeated sampler calls are cheap."""
    values = {k: v for k, v in (get_key(cfg, "forward", {}) or {}).items() if k not in ("kind", "dense")}
    try:
        params = HeatParams(**values)
    except TypeError as exc:
        raise ConfigError(f"bad [forward] section: {exc}", key="forward") from exc
    return params, HeatOperator(params, dense=bool(get_key(cfg, "forward.dense", True)))


def _forward(cfg, dim):
    kind = get_key(cfg, "forward.kind", "identity")
    if kind == "identity":
        return IdentityOperator(dim)
    if kind == "heat":
        params, op = _heat(cfg)
        if params.grid_n**2 != dim:
            raise ConfigError(f"heat grid {params.grid_n}^2 != field size {dim}", key="forward.grid_n")
        return op
    if kind == "restriction":
        idx = get_key(cfg, "forward.revealed")
        if idx is None:
            raise ConfigError("restriction needs forward.revealed (list of indices)", key="forward.revealed")
        return RestrictionOperator(Mask.from_indices(idx, dim))
    raise ConfigError(f"unknown forward kind {kind!r}", key="forward.kind")


def _measurement(run, forward, sigma, counter=0):
    """Measurement from ``measurement.path`` (x_hat as f64) or synthesised
    from ``measurement.truth`` (clean field as f64, or a DSET file with
    ``measurement.index``) plus seeded noise."""
    if get_key(run.cfg, "measurement.path") is not None:
        x_hat = read_f64(run.path("measurement.path"))
        if x_hat.size != forward.output_dim:
            raise FormatError(f"measurement has {x_hat.size} values, expected {forward.output_dim}")
        return x_hat, None
    truth = _truth(run)
    rng = np.random.default_rng(child_seed(run.seed, counter, stream=21))
    clean = forward.apply(truth)
    return clean + sigma * rng.standard_normal(clean.shape), truth


def _truth(run):
    path = run.path("measurement.truth")
    if path.read_bytes()[:4] == data.DSET_MAGIC:
        ds = data.load_dataset(path)
        idx = int(get_key(run.cfg, "measurement.index", 0))
        if not 0 <= idx < ds.count:
            raise ConfigError(f"measurement.index {idx} out of range", key="measurement.index")
        return ds.samples[idx]
    return read_f64(path)


def _sigmas(cfg):
    sigma = get_key(cfg, "noise.sigma", 1.0)
    return [float(s) for s in (sigma if isinstance(sigma, list) else [sigma])]


def _hmc_cfg(cfg, seed):
    return section(cfg, "hmc", hmc.HmcConfig, seed=seed)


def _map_cfg(cfg, seed):
    return section(cfg, "map", MapConfig, seed=seed)


# ---------------------------------------------------------------------------
# tasks


def task_gen_data(run):
    cfg = run.cfg
    kind = get_key(cfg, "dataset.kind", "rect")
    count = int(get_key(cfg, "dataset.count", 1000))
    if kind == "rect":
        grid_n = int(get_key(cfg, "dataset.grid_n", 16))
        length = float(get_key(cfg, "dataset.length", 2 * np.pi))
        ranges = get_key(cfg, "dataset.ranges")
        ds, params = data.sample_rect_dataset(count, run.seed, ranges, grid_n, length, return_params=True)
        run.f64(params.ravel(), "rect_params.f64")
    elif kind in ("shapes-rect", "shapes-cross"):
        ds = data.shapes_dataset(count, run.seed, kind=kind.split("-")[1],
                                 size=int(get_key(cfg, "dataset.size", 16)),
                                 n_labels=int(get_key(cfg, "dataset.n_labels", 10)))
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}", key="dataset.kind")
    p = run.out / "dataset.dset"
    data.save_dataset(ds, p)
    run.add(p)
    run.json({"kind": kind, "count": ds.count, "dim": ds.dim, "label_dim": ds.label_dim}, "dataset.json")


def _training_rows(run):
    path = run.path("dataset.path")
    ds = data.load_dataset(path) if path.suffix != ".idx" else data.read_idx(path)
    scale, shift = _decode(run.cfg)
    x = (ds.samples - shift) / scale
    if get_key(run.cfg, "dataset.joint", False):
        return data.Dataset(x, ds.labels).joint()
    return x


def task_train(run):
    rows = _training_rows(run)
    cfg = section(run.cfg, "gan", TrainConfig, seed=run.seed)
    gen, report = train(rows, cfg, checkpoint_dir=run.out / "checkpoints")
    run.add(report.checkpoints)
    p = run.out / "generator.ganp"
    nets.save(gen, p)
    run.add(p)
    report.to_csv(run.out / "train_log.csv")
    run.add(run.out / "train_log.csv")


def task_validate_prior(run):
    gen = _load_generator(run)
    rows = _training_rows(run)
    n_z = int(get_key(run.cfg, "validate.n_z_samples", 10000))
    check = validate_prior(gen, rows, n_z_samples=n_z, seed=run.seed)
    check.to_csv(run.out / "moments.csv")
    run.add(run.out / "moments.csv")
    run.json({"max_gap": check.max_gap}, "validate.json")


def _infer_one(run, post, tag, label_dim=0, counter=0):
    chain = hmc.sample(post, _hmc_cfg(run.cfg, child_seed(run.seed, counter, stream=22)), run.threads)
    map_result = latent_map(post, _map_cfg(run.cfg, child_seed(run.seed, counter, stream=23)))
    summary = summarize(chain, post, map_result, label_dim=label_dim)
    diag = hmc.diagnostics(chain)
    run.image(summary.mean, f"{tag}mean")
    run.image(summary.variance, f"{tag}variance")
    run.image(summary.map_field, f"{tag}map")
    run.image(summary.argmax_field, f"{tag}chain_argmax")
    p = run.out / f"{tag}chain.chn"
    hmc.write_chain(p, chain.flat)
    run.add(p)
    report = {
        "mean_pixel_variance": summary.mean_variance,
        "acceptance": chain.acceptance_rate,
        "divergences": int(chain.divergences.sum()),
        "final_step": float(chain.step_trace[0, -1]),
        "ess_min": float(diag.ess.min()),
        "ess_clamped": bool(diag.ess_clamped.any()),
        "map_r": map_result.r_value,
        "map_converged": map_result.converged,
        "map_grad_norm": map_result.grad_norm,
        "ood_score": summary.map_residual,
        "variance_clamp": summary.clamp,
    }
    if label_dim:
        report.update(label_mean=summary.label_mean, var_norm=summary.var_norm, predicted=summary.predicted)
    return summary, report


def task_infer(run):
    gen = _load_generator(run)
    scale, shift = _decode(run.cfg)
    forward = _forward(run.cfg, gen.output_dim)
    reports = {}
    for k, sigma in enumerate(_sigmas(run.cfg)):
        x_hat, truth = _measurement(run, forward, sigma, counter=k)
        post = LatentPosterior(gen, forward, NoiseModel.from_sigma(sigma), x_hat, scale, shift)
        tag = f"sigma{sigma:g}_"
        run.f64(x_hat, f"{tag}x_hat.f64")
        summary, report = _infer_one(run, post, tag, counter=k)
        if truth is not None:
            report["map_error"] = float(np.linalg.norm(summary.map_field - truth))
            report["mean_error"] = float(np.linalg.norm(summary.mean - truth))
        if get_key(run.cfg, "compare.oracle_mean") is not None:
            oracle_mean = read_f64(run.path("compare.oracle_mean"))
            gap = float(np.linalg.norm(summary.mean - oracle_mean) / np.linalg.norm(oracle_mean))
            report["oracle_rel_gap"] = gap
            p = run.out / f"{tag}comparison.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sigma", "relative_l2_gap_mean"])
                w.writerow([sigma, repr(gap)])
            run.add(p)
        reports[f"{sigma:g}"] = report
    run.json(reports, "summary.json")


def task_map(run):
    gen = _load_generator(run)
    scale, shift = _decode(run.cfg)
    forward = _forward(run.cfg, gen.output_dim)
    sigma = _sigmas(run.cfg)[0]
    noise = NoiseModel.from_sigma(sigma)
    x_hat, truth = _measurement(run, forward, sigma)
    post = LatentPosterior(gen, forward, noise, x_hat, scale, shift)
    result = latent_map(post, _map_cfg(run.cfg, child_seed(run.seed, 0, stream=23)))
    run.image(result.field, "gan_map")
    fields = {"gan": result.field}
    if forward.linear:
        for kind in get_key(run.cfg, "baseline.kinds", ["l2", "h1"]):
            bcfg = GaussianPriorConfig(kind=kind, alpha=float(get_key(run.cfg, "baseline.alpha", 0.1)))
            fields[kind] = gaussian_map(forward, noise, x_hat, bcfg)
            run.image(fields[kind], f"{kind}_map")
    p = run.out / "map.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "error", "r_value", "converged", "alpha"])
        for name, f in fields.items():
            err = "" if truth is None else repr(float(np.linalg.norm(f - truth)))
            if name == "gan":
                w.writerow([name, err, repr(result.r_value), int(result.converged), ""])
            else:
                w.writerow([name, err, "", "", get_key(run.cfg, "baseline.alpha", 0.1)])
    run.add(p)


def task_oracle(run):
    params, forward = _heat(run.cfg)
    sigma = _sigmas(run.cfg)[0]
    x_hat, truth = _measurement(run, forward, sigma)
    res = data.oracle_posterior(
        x_hat, sigma**2, params, get_key(run.cfg, "dataset.ranges"),
        n_mc=int(get_key(run.cfg, "oracle.n_mc", 200_000)), seed=child_seed(run.seed, 0, stream=24),
    )
    run.image(res.mean, "oracle_mean")
    run.image(res.variance, "oracle_variance")
    run.f64(x_hat, "x_hat.f64")
    run.json({"ess": res.ess, "n_mc": res.n_mc, "low_ess": res.low_ess}, "oracle.json")


def task_active(run):
    gen = _load_generator(run)
    ds = data.load_dataset(run.path("dataset.path"))
    idx = int(get_key(run.cfg, "active.index", 0))
    truth = ds.samples[idx]
    strategies = get_key(run.cfg, "active.strategies", ["variance", "random"])
    for strategy in strategies:
        state = run_active(
            truth, gen,
            sigma_y=float(get_key(run.cfg, "noise.sigma", 1.0)),
            strategy=strategy,
            n_windows=int(get_key(run.cfg, "active.n_windows", 6)),
            hmc_config=_hmc_cfg(run.cfg, 0),
            seed=run.seed,
            window_size=int(get_key(run.cfg, "active.window_size", 7)),
            map_config=_map_cfg(run.cfg, 0),
            out_dir=run.out,
            threads=run.threads,
        )
        run.add(state.files)


def task_ood(run):
    gen = _load_generator(run)
    sets = {k: data.load_dataset(run.path(f"dataset.{k}")) for k in ("path", "calibration", "ood")}
    label_dim = sets["path"].label_dim or int(get_key(run.cfg, "dataset.n_labels", 10))
    dim = sets["path"].dim
    sigma = _sigmas(run.cfg)[0]
    forward = RestrictionOperator(Mask(np.r_[np.ones(dim, bool), np.zeros(label_dim, bool)]))
    noise = NoiseModel.from_sigma(sigma)

    def items(ds, stream, prefix):
        out = []
        for i in range(ds.count):
            post = LatentPosterior(gen, forward, noise, ds.samples[i])
            seed = child_seed(run.seed, i, stream=stream)
            chain = hmc.sample(post, _hmc_cfg(run.cfg, seed), run.threads)
            s = summarize(chain, post, latent_map(post, _map_cfg(run.cfg, seed)), label_dim=label_dim)
            true = None if ds.labels is None else int(np.argmax(ds.labels[i]))
            out.append(ItemResult(s.map_residual, s.var_norm, s.label_mean, true, f"{prefix}{i}"))
        return out

    calib = items(sets["calibration"], 31, "calib_")
    rules = calibrate_rules([c.score for c in calib], [c.var_norm for c in calib],
                            float(get_key(run.cfg, "ood.percentile", 99.0)),
                            get_key(run.cfg, "ood.rule", "score"))
    test_in = items(sets["path"], 32, "in_")
    test_ood = items(sets["ood"], 33, "ood_")
    metrics = eval_ood_suite(test_in, test_ood, rules)
    write_metrics_csv(run.out / "ood_metrics.csv", test_in + test_ood, rules)
    run.add(run.out / "ood_metrics.csv")
    run.json({**dataclasses.asdict(metrics), "c1": rules.c1, "c2": rules.c2, "rule": rules.rule}, "ood.json")


TASK_FUNCS = {
    "gen-data": task_gen_data,
    "train": task_train,
    "infer": task_infer,
    "map": task_map,
    "oracle": task_oracle,
    "active": task_active,
    "ood": task_ood,
    "validate-prior": task_validate_prior,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="ganprior", description="Bayesian inference with a GAN prior")
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    return parser


def exit_code(exc):
    if isinstance(exc, (ConfigError, ValueError)):
        return 2
    if isinstance(exc, (NumericError, ArithmeticError)):
        return 3
    if isinstance(exc, (FormatError, OSError)):
        return 4
    return 1


def run(task, config_path, overrides=(), threads=1, seed=None, out=None):
    """Run one task; returns the manifest dict.  Raises on failure."""
    cfg = load_config(config_path, overrides)
    cfg = copy.deepcopy(cfg)
    cfg["task"] = task
    if seed is not None:
        cfg["seed"] = seed
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)", key="seed")
    if out is not None:
        cfg["out"] = str(out)
    if cfg.get("out") is None:
        raise ConfigError("an output directory is required (--out)", key="out")
    if threads < 1:
        raise ConfigError("threads must be >= 1", key="threads")
    base = Path(config_path).resolve().parent
    check_paths(task, cfg, base)
    ctx = Run(task, cfg, resolve(base, cfg["out"]), int(cfg["seed"]), threads, base)
    TASK_FUNCS[task](ctx)
    return ctx.manifest()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = run(args.task, args.config, args.overrides, args.threads, args.seed, args.out)
    except (GanPriorError, OSError, ValueError, ArithmeticError) as exc:
        code = exit_code(exc)
        line = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
        if getattr(exc, "key", None):
            line["key"] = exc.key
        print(json.dumps(line), file=sys.stderr)
        return code
    print(json.dumps({"ok": True, "task": args.task, "files": len(manifest["files"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
