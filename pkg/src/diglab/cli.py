"""Command-line front end: train runs, experiment bundles, regularizer
comparisons, all emitting CSV data plus reproducibility manifests.

Configuration resolves in three layers (preset, then config file, then
flags); the fully resolved config is echoed into every manifest so a run
can be reproduced from its artifacts alone. Unknown keys and flags are
rejected with a nearest-match suggestion rather than silently ignored.

Exit codes: 0 success, 2 configuration error, 3 diverged run, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (Dataset, ExperimentDependencyError,
                       ExperimentPreconditionError, GanConfig,
                       TWO_POINT_DATASET, coverage, train)
from .experiments import (EXPERIMENTS, ExperimentBundle, RunArtifact,
                          classify_outcome, default_workers, run_experiment,
                          seed_study, snapshot_hash)
from .nn import ConfigError, load_params, save_params

# Presets pin the two-point task constants; the lowdata-* entries document
# the published strength schedule (1000/fraction without augmentation,
# 10/fraction^2 with) and are untested at desk scale.
PRESETS: dict[str, dict] = {
    "toy-vanilla": {"regularizer": "none", "lam": 0.0},
    "toy-dig": {"regularizer": "dig", "lam": 1.0, "alpha": 1.0},
    "lowdata-20pct": {"regularizer": "dig", "lam": 5000.0, "alpha": 0.5},
    "lowdata-10pct": {"regularizer": "dig", "lam": 10000.0, "alpha": 0.5},
    "lowdata-aug-20pct": {"regularizer": "dig", "lam": 250.0, "alpha": 0.5},
    "lowdata-aug-10pct": {"regularizer": "dig", "lam": 1000.0, "alpha": 0.5},
}

_FIELD_TYPES = {f.name: f for f in dataclasses.fields(GanConfig)}
KEY_ALIASES = {"lambda": "lam"}
#: keys accepted in config files: every GanConfig field plus the dataset.
CONFIG_KEYS = tuple(_FIELD_TYPES) + ("lambda", "points")


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _coerce(name: str, raw):
    """Parse a raw string into the GanConfig field's type."""
    if not isinstance(raw, str):
        return raw
    f = _FIELD_TYPES[name]
    if f.type in ("int",):
        return int(raw)
    if f.type in ("float",):
        return float(raw)
    if f.type.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def parse_config_file(path: Path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; unknown keys rejected."""
    out = {}
    try:
        text = path.read_text()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}", code=4)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}"
                           f"{_suggest(key, CONFIG_KEYS)}")
        out[KEY_ALIASES.get(key, key)] = value
    return out


def resolve_config(preset: str | None, file_cfg: dict, flag_cfg: dict
                   ) -> tuple[GanConfig, Dataset]:
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}{_suggest(preset, PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(file_cfg)
    merged.update({k: v for k, v in flag_cfg.items() if v is not None})
    points = merged.pop("points", "0,4")
    if isinstance(points, str):
        points = [float(v) for v in points.replace(",", " ").split()]
    dataset = Dataset(np.asarray(points, dtype=float).reshape(-1, 1)
                      if np.ndim(points) == 1 else np.asarray(points, dtype=float))
    try:
        cfg = GanConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    except (ConfigError, TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}")
    return cfg, dataset


def config_as_dict(cfg: GanConfig, dataset: Dataset) -> dict:
    d = dataclasses.asdict(cfg)
    d["gen_widths"] = list(d["gen_widths"])
    d["disc_widths"] = list(d["disc_widths"])
    d["points"] = dataset.points.ravel().tolist() if dataset.points.shape[1] == 1 \
        else dataset.points.tolist()
    return d


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", code=4)


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- train ------------------------------------------------------------------


def cmd_train(args) -> int:
    flag_cfg = {k: getattr(args, k, None) for k in _FIELD_TYPES}
    flag_cfg["lam"] = args.lam
    flag_cfg["points"] = args.points
    file_cfg = {}
    if args.from_manifest:
        try:
            manifest = json.loads(Path(args.from_manifest).read_text())
        except OSError as e:
            raise CliError(f"cannot read manifest: {e}", code=4)
        file_cfg = dict(manifest["config"])
    if args.config:
        file_cfg.update(parse_config_file(Path(args.config)))
    cfg, dataset = resolve_config(args.preset, file_cfg, flag_cfg)

    outdir = Path(args.out)
    t0 = time.time()
    result = train(cfg, dataset)
    report = coverage(result.final_fakes, dataset.points, cfg.coverage_eps)

    _write(outdir / "trajectory.csv", result.log.to_csv())
    try:
        save_params(outdir / "gen.params", result.gen)
        save_params(outdir / "disc.params", result.disc)
        save_params(outdir / "gen_init.params", result.init_gen)
        save_params(outdir / "disc_init.params", result.init_disc)
    except OSError as e:
        raise CliError(f"cannot write parameters: {e}", code=4)
    outputs = ["trajectory.csv", "gen.params", "disc.params",
               "gen_init.params", "disc_init.params"]
    manifest = {
        "command": "train",
        "version": __version__,
        "seed": cfg.seed,
        "config": config_as_dict(cfg, dataset),
        "outputs": outputs,
        "hashes": {name: _file_hash(outdir / name) for name in outputs},
        "stop_reason": result.log.stop_reason,
        "coverage": {"covered_modes": report.covered_modes,
                     "trapped": report.trapped,
                     "final_fakes": result.final_fakes.ravel().tolist()},
        "duration_s": round(time.time() - t0, 3),
    }
    _write_json(outdir / "manifest.json", manifest)
    print(f"wrote {outdir}/trajectory.csv ({len(result.log)} records), "
          f"params and manifest.json")
    if result.log.diverged:
        print(f"run diverged: {result.log.stop_reason}", file=sys.stderr)
        return 3
    return 0


# --- experiment --------------------------------------------------------------


def _arm_row(experiment: str, seed: int, art: RunArtifact) -> dict:
    log = art.log
    return {
        "experiment": experiment,
        "seed": seed,
        "arm": art.name,
        "regularizer": art.config.effective_regularizer,
        "lambda": art.config.lam,
        "covered_modes": art.report.covered_modes,
        "trapped": int(art.report.trapped),
        "trapped_mode": "" if art.report.trapped_mode is None else art.report.trapped_mode,
        "outcome": classify_outcome(art.report, log.diverged),
        "final_gap": f"{log.gap[-1]:.17g}" if log.gap else "",
        "diverged": int(log.diverged),
        "stop_reason": log.stop_reason,
    }


def _write_bundle(outdir: Path, bundle: ExperimentBundle) -> list[dict]:
    bdir = outdir / f"{bundle.kind}_seed{bundle.seed}"
    rows = []
    manifest = {"experiment": bundle.kind, "seed": bundle.seed,
                "version": __version__, "info": bundle.info, "arms": {}}
    for art in bundle.runs:
        adir = bdir / art.name
        _write(adir / "trajectory.csv", art.log.to_csv())
        try:
            save_params(adir / "gen.params", art.result.gen)
            save_params(adir / "disc.params", art.result.disc)
            save_params(adir / "gen_init.params", art.result.init_gen)
            save_params(adir / "disc_init.params", art.result.init_disc)
        except OSError as e:
            raise CliError(f"cannot write parameters under {adir}: {e}", code=4)
        manifest["arms"][art.name] = {
            "config": config_as_dict(art.config, TWO_POINT_DATASET),
            "note": art.note,
            "stop_reason": art.log.stop_reason,
            "snapshot_hashes": {
                "gen": snapshot_hash(art.result.gen),
                "disc": snapshot_hash(art.result.disc),
                "init_gen": snapshot_hash(art.result.init_gen),
                "init_disc": snapshot_hash(art.result.init_disc),
            },
            "hashes": {"trajectory.csv": _file_hash(adir / "trajectory.csv")},
            "final_fakes": art.result.final_fakes.ravel().tolist(),
            "coverage": {"covered_modes": art.report.covered_modes,
                         "trapped": art.report.trapped,
                         "trapped_mode": art.report.trapped_mode},
        }
        rows.append(_arm_row(bundle.kind, bundle.seed, art))
    _write_json(bdir / "manifest.json", manifest)
    return rows


def load_stuck_bundle(outdir: Path, seed: int) -> ExperimentBundle:
    """Rebuild the parts of a stuck bundle that escape depends on from its
    on-disk artifacts (manifest, final parameters, coverage)."""
    from .dynamics import TrajectoryLog, TrainResult

    bdir = Path(outdir) / f"stuck_seed{seed}"
    try:
        manifest = json.loads((bdir / "manifest.json").read_text())
    except OSError as e:
        raise CliError(
            f"no stuck bundle for seed {seed} under {outdir} ({e}); run "
            f"`diglab experiment stuck --seeds N` there first", code=2)
    arm = manifest["arms"]["vanilla"]
    cfg_dict = dict(arm["config"])
    points = cfg_dict.pop("points")
    cfg = GanConfig(**{KEY_ALIASES.get(k, k): _coerce(KEY_ALIASES.get(k, k), v)
                       for k, v in cfg_dict.items()})
    dataset = Dataset(np.asarray(points, dtype=float).reshape(-1, 1))
    gen = load_params(bdir / "vanilla" / "gen.params")
    disc = load_params(bdir / "vanilla" / "disc.params")
    init_gen = load_params(bdir / "vanilla" / "gen_init.params")
    init_disc = load_params(bdir / "vanilla" / "disc_init.params")
    final_fakes = np.asarray(arm["final_fakes"], dtype=float).reshape(-1, 1)
    log = TrajectoryLog(stop_reason=arm["stop_reason"])
    result = TrainResult(cfg, gen, disc, log, init_gen, init_disc, final_fakes)
    report = coverage(final_fakes, dataset.points, cfg.coverage_eps)
    bundle = ExperimentBundle("stuck", seed, info=manifest.get("info", {}))
    bundle.runs.append(RunArtifact("vanilla", cfg, result, report))
    return bundle


def _summary_csv(rows: list[dict]) -> str:
    if not rows:
        return "\n"
    cols = list(rows[0])
    lines = [",".join(cols)]
    lines += [",".join(str(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_experiment(args) -> int:
    which = args.which
    seeds = list(range(args.base_seed, args.base_seed + args.seeds))
    outdir = Path(args.out)
    overrides = {}
    if args.optimizer:
        overrides["optimizer"] = args.optimizer
    if args.iterations:
        overrides["iterations"] = args.iterations
    if which == "escape" and not args.stuck_dir:
        raise CliError(
            "escape continues from stuck artifacts: pass --stuck-dir DIR "
            "(a directory written by `diglab experiment stuck`)")
    rows: list[dict] = []
    for seed in seeds:
        stuck = None
        stages = EXPERIMENTS if which == "all" else (which,)
        for stage in stages:
            if stage == "escape":
                if stuck is None:
                    stuck = load_stuck_bundle(Path(args.stuck_dir), seed)
                try:
                    bundle = run_experiment("escape", seed, stuck=stuck, **overrides)
                except ExperimentDependencyError as e:
                    raise CliError(str(e))
                except ExperimentPreconditionError as e:
                    rows.append(_skip_row("escape", seed, str(e)))
                    continue
            elif stage == "perturb":
                bundle = run_experiment("perturb", seed, stuck=stuck, **overrides)
            else:
                bundle = run_experiment(stage, seed, **overrides)
                if stage == "stuck":
                    stuck = bundle
            rows.extend(_write_bundle(outdir, bundle))
    _write(outdir / "summary.csv", _summary_csv(rows))
    print(f"wrote {len(rows)} summary rows to {outdir}/summary.csv")
    return 0


def _skip_row(experiment: str, seed: int, reason: str) -> dict:
    return {"experiment": experiment, "seed": seed, "arm": "-",
            "regularizer": "-", "lambda": "", "covered_modes": "",
            "trapped": "", "trapped_mode": "", "outcome": f"skipped: {reason}",
            "final_gap": "", "diverged": "", "stop_reason": ""}


# --- compare ------------------------------------------------------------------


def cmd_compare(args) -> int:
    kinds = []
    for k in args.regularizers.split(","):
        k = k.strip()
        if not k:
            continue
        if k in kinds:
            print(f"warning: duplicate regularizer {k!r} ignored", file=sys.stderr)
            continue
        from .ganreg import REGULARIZER_KINDS
        if k not in REGULARIZER_KINDS:
            raise CliError(f"unknown regularizer {k!r}"
                           f"{_suggest(k, REGULARIZER_KINDS)}")
        kinds.append(k)
    if not kinds:
        raise CliError("no regularizers given")
    seeds = list(range(args.base_seed, args.base_seed + args.seeds))
    overrides = {}
    if args.iterations:
        overrides["iterations"] = args.iterations
    if args.optimizer:
        overrides["optimizer"] = args.optimizer
    rows = seed_study(kinds, seeds, workers=args.workers, **overrides)
    out_rows = [{
        "regularizer": r.regularizer, "seed": r.seed, "lambda": r.lam,
        "covered_modes": r.covered_modes, "trapped": int(r.trapped),
        "mean_gap_last10pct": f"{r.steady_gap:.17g}",
        "final_gap": f"{r.final_gap:.17g}", "diverged": int(r.diverged),
    } for r in rows]
    outdir = Path(args.out)
    _write(outdir / "compare.csv", _summary_csv(out_rows))
    by_kind = {k: [r for r in rows if r.regularizer == k] for k in kinds}
    print(f"{'regularizer':>12} {'both-modes':>10} {'trapped':>8} {'diverged':>9}")
    for k in kinds:
        rs = by_kind[k]
        both = sum(1 for r in rs if r.covered_modes >= 2)
        print(f"{k:>12} {both:>7}/{len(rs)} {sum(r.trapped for r in rs):>8} "
              f"{sum(r.diverged for r in rs):>9}")
    print(f"wrote {outdir}/compare.csv")
    return 0


# --- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def _all_option_strings(self):
        options = []
        for action in self._actions:
            options.extend(action.option_strings)
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    for a in sub._actions:
                        options.extend(a.option_strings)
        return options

    def error(self, message):
        for token in message.split():
            token = token.strip(",")
            if token.startswith("--"):
                message += _suggest(token, self._all_option_strings())
                break
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    p = _Parser(prog="diglab", allow_abbrev=False,
                description="GAN training-dynamics laboratory on point datasets")
    p.add_argument("--version", action="version", version=f"diglab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False,
                       help="run one training configuration")
    t.add_argument("--preset", choices=sorted(PRESETS),
                   help="named configuration to start from")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--from-manifest", help="re-run the config echoed in a manifest")
    t.add_argument("--out", default="runs/train", help="output directory")
    t.add_argument("--points", help="comma-separated real data points")
    t.add_argument("--lambda", dest="lam", type=float, help="regularizer weight")
    for name, f in _FIELD_TYPES.items():
        if name == "lam":
            continue
        flag = "--" + name.replace("_", "-")
        if f.type == "int":
            t.add_argument(flag, type=int, dest=name)
        elif f.type == "float":
            t.add_argument(flag, type=float, dest=name)
        elif f.type.startswith("tuple"):
            t.add_argument(flag, dest=name)
        else:
            t.add_argument(flag, dest=name)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("experiment", allow_abbrev=False,
                       help="run attractor experiment bundles")
    e.add_argument("which", choices=EXPERIMENTS + ("all",))
    e.add_argument("--seeds", type=int, default=1, help="number of seeds")
    e.add_argument("--base-seed", type=int, default=0)
    e.add_argument("--iterations", type=int, default=None)
    e.add_argument("--optimizer", default=None)
    e.add_argument("--stuck-dir", default=None,
                   help="directory with prior stuck bundles (escape only)")
    e.add_argument("--out", default="runs/experiment")
    e.set_defaults(fn=cmd_experiment)

    c = sub.add_parser("compare", allow_abbrev=False,
                       help="compare regularizers over shared seeds")
    c.add_argument("--regularizers", default="none,dig",
                   help="comma-separated list")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--base-seed", type=int, default=0)
    c.add_argument("--iterations", type=int, default=None)
    c.add_argument("--optimizer", default=None)
    c.add_argument("--workers", type=int, default=None,
                   help="process pool size (defaults to DIGLAB_WORKERS or "
                        "the CPU count)")
    c.add_argument("--out", default="runs/compare")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"diglab: error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, ValueError) as e:
        print(f"diglab: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
