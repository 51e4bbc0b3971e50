"""Command-line front end.

Subcommands: `run` (experiments or named adaptive problems from a config),
`list` (the experiment catalog), and the `theorylab` / `pt` / `transport`
shortcuts. Every run writes a manifest.json recording the config, a content
hash over the deterministic artifacts, and the wall time; the hash excludes
wall-clock-dependent files so identical (config, seed) runs agree.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import click
import numpy as np

from . import core, experiments, models, moi, optim, tempering
from .rng import RngStream


class ConfigError(ValueError):
    """Malformed or non-schema config input."""


# ---------------------------------------------------------------------------
# config parsing: JSON, or a deliberately small TOML subset
# (key = value lines, [section] headers, strings/numbers/booleans/flat arrays)

def _parse_toml_scalar(tok: str, where: str):
    tok = tok.strip()
    if not tok:
        raise ConfigError(f"empty value {where}")
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        body = tok[1:-1]
        if '"' in body or "\\" in body:
            raise ConfigError(f"unsupported string escape {where}")
        return body
    if tok == "true":
        return True
    if tok == "false":
        return False
    if tok.startswith("[") and tok.endswith("]"):
        inner = tok[1:-1].strip()
        if not inner:
            return []
        return [_parse_toml_scalar(p, where) for p in inner.split(",")]
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"cannot parse value {tok!r} {where}")


def _strip_comment(raw: str) -> str:
    in_str = False
    for i, ch in enumerate(raw):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return raw[:i]
    return raw


def parse_toml_subset(text: str) -> dict:
    """Flat TOML subset: top-level keys and one level of [section] tables."""
    out: dict = {}
    section: Optional[dict] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        where = f"at line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name or "." in name or "[" in name:
                raise ConfigError(f"bad section header {where}")
            if name in out:
                raise ConfigError(f"duplicate section {name!r} {where}")
            section = {}
            out[name] = section
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value {where}")
        key, _, val = line.partition("=")
        key = key.strip()
        if not key or " " in key:
            raise ConfigError(f"bad key {key!r} {where}")
        dest = section if section is not None else out
        if key in dest:
            raise ConfigError(f"duplicate key {key!r} {where}")
        dest[key] = _parse_toml_scalar(val, where)
    return out


def load_config(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    stripped = text.lstrip()
    if path.endswith(".json") or stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config: {e}")
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return data
    return parse_toml_subset(text)


# ---------------------------------------------------------------------------
# experiment configs

@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    output_dir: str = "."
    overrides: Dict = field(default_factory=dict)


_CONFIG_KEYS = {"experiment", "seed", "output_dir", "overrides"}
# accepted spellings for the figure batch
_EXPERIMENT_ALIASES = {"theorylab figures": "theorylab-figures"}


def experiment_config(data: dict) -> ExperimentConfig:
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "experiment" not in data:
        raise ConfigError("config must name an experiment")
    name = _EXPERIMENT_ALIASES.get(data["experiment"], data["experiment"])
    if name not in experiments.REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; choose from "
                          f"{sorted(experiments.REGISTRY)}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    overrides = data.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("overrides must be a table")
    allowed = set(experiments.REGISTRY[name].allowed_overrides)
    bad = set(overrides) - allowed
    if bad:
        raise ConfigError(f"unknown overrides for {name}: {sorted(bad)} "
                          f"(allowed: {sorted(allowed)})")
    out_dir = data.get("output_dir", ".")
    if not isinstance(out_dir, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(name, seed, out_dir, dict(overrides))


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(file_hashes: Dict[str, str]) -> str:
    h = hashlib.sha256()
    for name in sorted(file_hashes):
        h.update(f"{name}:{file_hashes[name]}\n".encode())
    return h.hexdigest()


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute one experiment; writes its artifacts plus manifest.json and
    returns the manifest dict (status 'pass' or 'fail')."""
    info = experiments.REGISTRY[config.experiment]
    os.makedirs(config.output_dir, exist_ok=True)
    t0 = time.perf_counter()
    failures: List[str] = []
    files: List[str] = []
    try:
        files = info.runner(config.seed, config.output_dir, **config.overrides)
    except AssertionError as e:
        failures.append(str(e))
        files = [f"{config.output_dir}/{f}" for f in info.output_files
                 if os.path.exists(f"{config.output_dir}/{f}")]
    wall = time.perf_counter() - t0
    hashes = {}
    for f in files:
        base = os.path.basename(f)
        if base in experiments.UNHASHED_FILES:
            continue
        hashes[base] = _file_sha256(f)
    manifest = {
        "experiment": config.experiment,
        "seed": config.seed,
        "overrides": config.overrides,
        "output_dir": config.output_dir,
        "files": hashes,
        "content_hash": content_hash(hashes),
        "wall_time_seconds": wall,
        "status": "fail" if failures else "pass",
        "failures": failures,
    }
    with open(f"{config.output_dir}/manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# named adaptive problems from a run config

_PROBLEM_KEYS = {"problem_name", "phi0", "x0", "schedule", "nt", "T", "seed",
                 "output_dir"}
_SCHEDULE_KEYS = {"kind", "gamma0", "C", "alpha"}
_NT_KEYS = {"kind", "n"}


def _schedule_from_config(data: dict) -> optim.StepSchedule:
    unknown = set(data) - _SCHEDULE_KEYS
    if unknown:
        raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
    kind = data.get("kind", "parametric")
    if kind == "constant":
        return optim.constant_schedule(float(data.get("gamma0", 0.1)))
    if kind == "parametric":
        return optim.parametric_schedule(float(data.get("gamma0", 0.1)),
                                         float(data.get("C", 1.0)),
                                         float(data.get("alpha", 0.6)))
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _nt_from_config(data: dict):
    unknown = set(data) - _NT_KEYS
    if unknown:
        raise ConfigError(f"unknown nt keys: {sorted(unknown)}")
    kind = data.get("kind", "constant")
    if kind not in ("constant", "log_growth"):
        raise ConfigError(f"unknown nt kind {kind!r}")
    return moi.nt_schedule(kind, int(data.get("n", 1)))


def run_problem_config(data: dict) -> dict:
    """Run a named adaptive problem and write its trajectory CSV."""
    unknown = set(data) - _PROBLEM_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    name = data.get("problem_name")
    try:
        problem, phi0, x0 = moi.example_problem(name)
    except ValueError as e:
        raise ConfigError(str(e))
    if "phi0" in data:
        phi0 = np.asarray(data["phi0"], dtype=float).reshape(-1)
    if "x0" in data:
        x0 = np.asarray(data["x0"], dtype=float).reshape(-1)
    schedule = _schedule_from_config(data.get("schedule", {}))
    nt = _nt_from_config(data.get("nt", {}))
    T = data.get("T", 1000)
    if not isinstance(T, int) or T < 1:
        raise ConfigError("T must be a positive integer")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    out_dir = data.get("output_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    report = moi.run_moi(problem, phi0, x0, schedule, nt, T,
                         RngStream(seed))
    trace_path = f"{out_dir}/{name}_trace.csv"
    moi.write_moi_trace_csv(trace_path, report)
    wall = time.perf_counter() - t0
    hashes = {os.path.basename(trace_path): _file_sha256(trace_path)}
    manifest = {
        "problem_name": name,
        "seed": seed,
        "T": T,
        "output_dir": out_dir,
        "files": hashes,
        "content_hash": content_hash(hashes),
        "wall_time_seconds": wall,
        "status": "fail" if report.diverged else "pass",
        "failures": (["divergence guard tripped at "
                      f"t={report.divergence_t}"] if report.diverged else []),
    }
    with open(f"{out_dir}/manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# free-form replica-exchange runs

_PT_KEYS = {"target", "n_chains", "sweeps", "kind", "ref_sd", "slice_width",
            "seed", "output_dir"}

_PT_TARGETS = {
    "bimodal": lambda: models.scalar_target(
        models.GaussianMixture1D((0.5, 0.5), (-4.0, 4.0), (0.5, 0.5)),
        name="bimodal"),
    "standard_normal": lambda: models.scalar_target(
        models.Gaussian1D(0.0, 1.0), name="standard_normal"),
}


def run_pt_config(data: dict) -> dict:
    """Run replica exchange against a fixed Gaussian reference and write
    swap statistics, round trips, and the target-chain trace."""
    unknown = set(data) - _PT_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    target_name = data.get("target", "bimodal")
    if target_name not in _PT_TARGETS:
        raise ConfigError(f"unknown target '{target_name}'; choose from "
                          f"{sorted(_PT_TARGETS)}")
    target = _PT_TARGETS[target_name]()
    n_chains = data.get("n_chains", 8)
    if not isinstance(n_chains, int) or n_chains < 2:
        raise ConfigError("n_chains must be an integer >= 2")
    sweeps = data.get("sweeps", 1024)
    if not isinstance(sweeps, int) or sweeps < 1:
        raise ConfigError("sweeps must be a positive integer")
    kind = data.get("kind", "single_leg")
    if kind not in ("single_leg", "two_leg"):
        raise ConfigError("kind must be 'single_leg' or 'two_leg'")
    ref_sd = float(data.get("ref_sd", 3.0))
    if ref_sd <= 0:
        raise ConfigError("ref_sd must be positive")
    slice_width = float(data.get("slice_width", 2.0))
    if slice_width <= 0:
        raise ConfigError("slice_width must be positive")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    out_dir = data.get("output_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    ref = models.Gaussian1D(0.0, ref_sd)
    log_ref = models.scalar_target(ref).log_density
    if kind == "two_leg":
        # fixed reference on both legs; the adaptive version lives in the
        # pt-variational experiment
        path = tempering.two_leg_path(log_ref, log_ref, target)
    else:
        path = tempering.single_leg_path(log_ref, target)
    schedule = tempering.equally_spaced_schedule(n_chains)
    kernels = []
    for i, beta in enumerate(schedule.betas):
        level = tempering.tempered_target(path, float(beta))
        if i == 0:
            # exact reference-level exploration
            kernels.append(core.IidKernel(
                level, lambda rng: ref_sd * rng.normal(size=1)))
        else:
            kernels.append(core.slice_kernel(level, width=slice_width))
    t0 = time.perf_counter()
    report = tempering.nrpt_run(path, schedule, kernels, sweeps,
                                RngStream(seed), np.zeros(1))
    files = {
        f"{out_dir}/swap_stats.csv": tempering.write_swap_stats_csv,
        f"{out_dir}/roundtrips.csv": tempering.write_roundtrips_csv,
    }
    for fpath, writer in files.items():
        writer(fpath, report)
    trace_path = f"{out_dir}/pt_trace.csv"
    core.write_trace_csv(trace_path, report.target_trace)
    wall = time.perf_counter() - t0
    hashes = {}
    for fpath in list(files) + [trace_path]:
        hashes[os.path.basename(fpath)] = _file_sha256(fpath)
    manifest = {
        "target": target_name,
        "kind": kind,
        "n_chains": n_chains,
        "sweeps": sweeps,
        "seed": seed,
        "output_dir": out_dir,
        "files": hashes,
        "content_hash": content_hash(hashes),
        "wall_time_seconds": wall,
        "status": "pass",
        "failures": [],
    }
    with open(f"{out_dir}/manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# click wiring

def _finish(manifest: dict):
    if manifest["status"] != "pass":
        click.echo(json.dumps({"status": "fail",
                               "failures": manifest["failures"]}))
        sys.exit(1)
    click.echo(f"pass: {len(manifest['files'])} artifact(s) in "
               f"{manifest['output_dir']}")


@click.group()
def main():
    """Adaptive-MCMC experiment runner."""


@main.command("run")
@click.option("--experiment", "experiment_name", default=None,
              help="Experiment name (see `list`).")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True), help="JSON/TOML config file.")
@click.option("--seed", default=None, type=int)
@click.option("--output-dir", default=None, type=click.Path())
def run_cmd(experiment_name, config_path, seed, output_dir):
    """Run one experiment, or a named problem given via --config."""
    data: dict = {}
    if config_path is not None:
        data = load_config(config_path)
    if experiment_name is not None:
        data["experiment"] = experiment_name
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    try:
        if "problem_name" in data:
            manifest = run_problem_config(data)
        else:
            manifest = run_experiment(experiment_config(data))
    except ConfigError as e:
        raise click.UsageError(str(e))
    _finish(manifest)


@main.command("list")
@click.option("--json", "as_json", is_flag=True, default=False)
def list_cmd(as_json):
    """Show the experiment catalog."""
    entries = []
    for name in sorted(experiments.REGISTRY):
        info = experiments.REGISTRY[name]
        entries.append({
            "name": name,
            "description": info.description,
            "expected_runtime": info.expected_runtime,
            "output_files": list(info.output_files),
            "overrides": list(info.allowed_overrides),
        })
    if as_json:
        click.echo(json.dumps(entries, indent=1, sort_keys=True))
        return
    for e in entries:
        click.echo(f"{e['name']}  ({e['expected_runtime']})")
        click.echo(f"  {e['description']}")
        click.echo(f"  outputs: {', '.join(e['output_files'])}")


@main.command("theorylab")
@click.option("--seed", default=0, type=int)
@click.option("--output-dir", default=".", type=click.Path())
def theorylab_cmd(seed, output_dir):
    """Emit the counterexample figure CSVs."""
    _finish(run_experiment(ExperimentConfig("theorylab-figures", seed,
                                            output_dir)))


@main.group("pt")
def pt_group():
    """Parallel-tempering experiments."""


@pt_group.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def pt_run_cmd(config_path):
    """Replica-exchange run from a config file."""
    try:
        _finish(run_pt_config(load_config(config_path)))
    except ConfigError as e:
        raise click.UsageError(str(e))


@pt_group.command("scaling")
@click.option("--seed", default=0, type=int)
@click.option("--output-dir", default=".", type=click.Path())
@click.option("--dims", default=None,
              help="Comma-separated dimensions, e.g. 1,2,4,8,16,32,64.")
def pt_scaling_cmd(seed, output_dir, dims):
    overrides = {}
    if dims is not None:
        try:
            overrides["dims"] = tuple(int(s) for s in dims.split(",") if s.strip())
        except ValueError:
            raise click.UsageError(f"bad --dims value '{dims}'")
        if not overrides["dims"]:
            raise click.UsageError("--dims needs at least one dimension")
    _finish(run_experiment(ExperimentConfig("pt-scaling", seed, output_dir,
                                            overrides)))


@pt_group.command("variational")
@click.option("--seed", default=0, type=int)
@click.option("--output-dir", default=".", type=click.Path())
def pt_variational_cmd(seed, output_dir):
    _finish(run_experiment(ExperimentConfig("pt-variational", seed,
                                            output_dir)))


@main.command("transport")
@click.option("--seed", default=0, type=int)
@click.option("--output-dir", default=".", type=click.Path())
def transport_cmd(seed, output_dir):
    """Train the affine transport map on the default benchmark."""
    _finish(run_experiment(ExperimentConfig("transport", seed, output_dir)))


if __name__ == "__main__":
    main()
