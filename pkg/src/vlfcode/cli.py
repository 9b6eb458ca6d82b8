"""Command-line entry points: train, eval, sweep, dynamics, gradcheck.

Configuration comes from an INI file (``--config``) plus flag overrides; flags
win. Every run writes ``manifest.ini`` into the output directory with the
fully resolved configuration, so re-running from the manifest alone reproduces
every artifact byte-identically (nothing here emits timestamps).

Exit codes: 0 success, 2 configuration error, 4 gradient-check gate failure,
3 any other runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import __version__
from .channels import ChannelConfig, load_fading_trajectory
from .codec import load_checkpoint
from .errors import ConfigurationError
from .evaluate import (
    OperatingPointResult,
    dynamics_experiment,
    emit_dynamics,
    emit_results,
    evaluate_operating_point,
    sweep,
)
from .training import PRESET_NAMES, TrainConfig, gradient_check, preset, train_codec

VERBS = ("train", "eval", "sweep", "dynamics", "gradcheck")

_UNSET = object()  # key absent: fall back to the preset / resolver
_REQUIRED = object()


# --------------------------------------------------------------------------
# Option schemas: (kind, default) per key, per verb
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Opt:
    kind: str
    default: Any = _UNSET
    choices: tuple[str, ...] = ()


_KIND_DESC = {
    "int": "an integer",
    "float": "a number",
    "bool": "true or false",
    "str": "a string",
    "choice": "one of the listed names",
    "opt_int": "an integer or 'none'",
    "opt_float": "a number or 'none'",
    "opt_str": "a string or 'none'",
    "float_or_range": "a number or 'lo,hi'",
    "float_list": "comma-separated numbers",
    "int_list": "comma-separated integers",
    "round_or_auto": "'auto' or an integer",
}

# Train keys mirror TrainConfig fields (seed lives in [run]).
_TRAIN_FIELDS = {
    "variant": _Opt("choice", choices=("R", "T", "hybrid")),
    "q": _Opt("int"),
    "m": _Opt("int"),
    "tau_max": _Opt("int"),
    "latent_dim": _Opt("int"),
    "tau_vd": _Opt("int"),
    "batch_size": _Opt("int"),
    "steps": _Opt("int"),
    "lr": _Opt("float"),
    "weight_decay": _Opt("float"),
    "theta": _Opt("float"),
    "offset_c": _Opt("float"),
    "mu": _Opt("opt_int"),
    "eta_f": _Opt("float_or_range"),
    "eta_b": _Opt("float"),
    "gamma": _Opt("opt_float"),
    "gamma_t": _Opt("opt_float"),
    "threshold_choices": _Opt("float_list"),
    "phase": _Opt("choice", choices=("pretrain", "finetune")),
    "fixed_horizon_frac": _Opt("float"),
    "lr_floor_frac": _Opt("float"),
    "grad_clip": _Opt("float"),
    "dtype": _Opt("choice", choices=("float32", "float64")),
    "snr_in_db_tau_plus": _Opt("bool"),
    "log_every": _Opt("int"),
    "checkpoint_every": _Opt("int"),
}
_TRAIN_TO_FIELD = {"q": "Q", "eta_f": "eta_f_db", "eta_b": "eta_b_db"}

_EVAL_KEYS = {
    "checkpoint": _Opt("str", _REQUIRED),
    "variant": _Opt("choice", "auto", choices=("auto", "R", "T", "hybrid")),
    "eta_f": _Opt("float", _REQUIRED),
    "eta_b": _Opt("float", float("inf")),
    "gamma": _Opt("opt_float", None),
    "gamma_t": _Opt("opt_float", None),
    "sessions": _Opt("int", 10_000),
    "tau_max": _Opt("opt_int", None),
    "first_decode_round": _Opt("round_or_auto", "auto"),
    "chunk_size": _Opt("int", 2048),
    "trajectory": _Opt("opt_str", None),
}

_SCHEMAS: dict[str, dict[str, _Opt]] = {
    "train": {
        "preset": _Opt("choice", "desk-R", choices=PRESET_NAMES),
        "checkpoint": _Opt("opt_str", None),
        **_TRAIN_FIELDS,
    },
    "eval": dict(_EVAL_KEYS),
    "sweep": {
        **{k: (_Opt("opt_float", None) if k == "eta_f" else v) for k, v in _EVAL_KEYS.items()},
        "gamma_list": _Opt("float_list", ()),
        "eta_f_grid": _Opt("float_list", ()),
    },
    "dynamics": {
        "checkpoint": _Opt("str", _REQUIRED),
        "eta_f": _Opt("float", _REQUIRED),
        "eta_b": _Opt("float", float("inf")),
        "trials": _Opt("int", 10_000),
        "rounds": _Opt("int_list", (1, 2, 4, 6)),
        "chunk_size": _Opt("int", 1024),
        "trajectory": _Opt("opt_str", None),
    },
    "gradcheck": {
        "draws": _Opt("int", 5),
        "fd_step": _Opt("float", 1e-5),
        "batch": _Opt("int", 2),
        "theta": _Opt("float", 2.0),
        "offset_c": _Opt("float", 1.0),
        "gate": _Opt("float", 1e-4),
    },
}

_RUN_KEYS = ("verb", "seed", "out", "version")


def _parse_value(section: str, key: str, raw: str, opt: _Opt) -> Any:
    text = raw.strip()
    lowered = text.lower()
    try:
        if opt.kind == "int":
            return int(text)
        if opt.kind == "float":
            return float(text)
        if opt.kind == "bool":
            return {"true": True, "false": False}[lowered]
        if opt.kind in ("str", "opt_str"):
            if opt.kind == "opt_str" and lowered in ("", "none"):
                return None
            if not text:
                raise ValueError
            return text
        if opt.kind == "choice":
            if text not in opt.choices:
                raise ConfigurationError(
                    f"[{section}] {key}: {text!r} is not one of {', '.join(opt.choices)}"
                )
            return text
        if opt.kind == "opt_int":
            return None if lowered in ("", "none") else int(text)
        if opt.kind == "opt_float":
            return None if lowered in ("", "none") else float(text)
        if opt.kind == "float_or_range":
            if "," in text:
                lo, hi = (float(p) for p in text.split(","))
                return (lo, hi)
            return float(text)
        if opt.kind == "float_list":
            return () if not text else tuple(float(p) for p in text.split(","))
        if opt.kind == "int_list":
            return () if not text else tuple(int(p) for p in text.split(","))
        if opt.kind == "round_or_auto":
            return "auto" if lowered == "auto" else int(text)
    except (ValueError, KeyError):
        raise ConfigurationError(
            f"[{section}] {key}: expected {_KIND_DESC[opt.kind]}, got {raw!r}"
        ) from None
    raise ConfigurationError(f"[{section}] {key}: unhandled kind {opt.kind!r}")


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------------
# Config resolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved run: verb, seeding, output dir, and typed options."""

    verb: str
    seed: int
    out: Path
    options: dict[str, Any]
    version: str = __version__


def _read_ini(path: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config file {path}: {exc}") from None
    return {name: dict(parser[name]) for name in parser.sections()}


def parse_config(
    path: str | None = None,
    overrides: dict[str, str] | None = None,
    verb: str | None = None,
) -> RunConfig:
    """Resolve file + flag overrides into a validated RunConfig.

    Flags win over file values; unknown sections/keys and type mismatches are
    errors naming the offending entry.
    """
    sections = _read_ini(path) if path is not None else {}
    for name in sections:
        if name != "run" and name not in VERBS:
            raise ConfigurationError(f"unknown section [{name}] (valid: run, {', '.join(VERBS)})")

    run_raw = dict(sections.get("run", {}))
    for key in run_raw:
        if key not in _RUN_KEYS:
            raise ConfigurationError(
                f"unknown key {key!r} in [run] (valid: {', '.join(_RUN_KEYS)})"
            )

    the_verb = verb if verb is not None else run_raw.get("verb")
    if the_verb is None:
        raise ConfigurationError("missing required key 'verb' (positional argument or [run] verb)")
    if the_verb not in VERBS:
        raise ConfigurationError(f"unknown verb {the_verb!r} (valid: {', '.join(VERBS)})")
    for name in sections:
        if name in VERBS and name != the_verb:
            raise ConfigurationError(f"section [{name}] does not match verb {the_verb!r}")

    raw = dict(sections.get(the_verb, {}))
    for key, value in (overrides or {}).items():
        if key == "seed":
            run_raw["seed"] = value
        elif key == "out":
            run_raw["out"] = value
        else:
            raw[key] = value

    seed = _parse_value("run", "seed", str(run_raw.get("seed", "0")), _Opt("int"))
    if "out" not in run_raw:
        raise ConfigurationError("missing required key 'out' (flag --out or [run] out)")
    out = Path(str(run_raw["out"]))

    schema = _SCHEMAS[the_verb]
    for key in raw:
        if key not in schema:
            raise ConfigurationError(
                f"unknown key {key!r} for verb '{the_verb}' "
                f"(valid: {', '.join(sorted(schema))})"
            )
    options: dict[str, Any] = {}
    for key, opt in schema.items():
        if key in raw:
            options[key] = _parse_value(the_verb, key, str(raw[key]), opt)
        elif opt.default is _REQUIRED:
            raise ConfigurationError(f"[{the_verb}] missing required key {key!r}")
        else:
            options[key] = opt.default

    if the_verb == "train":
        options = _resolve_train(options, seed)
    return RunConfig(verb=the_verb, seed=seed, out=out, options=options)


def _resolve_train(options: dict[str, Any], seed: int) -> dict[str, Any]:
    """Expand the preset into explicit field values (manifest completeness)."""
    replacements = {
        _TRAIN_TO_FIELD.get(key, key): value
        for key, value in options.items()
        if key in _TRAIN_FIELDS and value is not _UNSET
    }
    config = preset(options["preset"], seed=seed, **replacements)
    resolved = {"preset": options["preset"], "checkpoint": options["checkpoint"]}
    field_to_key = {v: k for k, v in _TRAIN_TO_FIELD.items()}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue  # echoed by [run] seed
        resolved[field_to_key.get(f.name, f.name)] = getattr(config, f.name)
    return resolved


def _train_config(rc: RunConfig) -> TrainConfig:
    kwargs = {
        _TRAIN_TO_FIELD.get(key, key): value
        for key, value in rc.options.items()
        if key not in ("preset", "checkpoint")
    }
    return TrainConfig(seed=rc.seed, **kwargs)


def write_manifest(rc: RunConfig, path: Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        "verb": rc.verb,
        "seed": str(rc.seed),
        "out": str(rc.out),
        "version": rc.version,
    }
    parser[rc.verb] = {key: _format_value(value) for key, value in rc.options.items()}
    with open(path, "w") as fh:
        parser.write(fh)


# --------------------------------------------------------------------------
# Verb runners
# --------------------------------------------------------------------------


def _load_model(rc: RunConfig):
    codec, meta = load_checkpoint(rc.options["checkpoint"])
    variant = rc.options.get("variant", "auto")
    if variant == "auto":
        variant = str(meta.get("variant", codec.cfg.variant))
    return codec, variant


def _channel(rc: RunConfig, eta_f: float) -> ChannelConfig:
    trajectory = rc.options.get("trajectory")
    fading = load_fading_trajectory(trajectory) if trajectory else None
    return ChannelConfig(eta_f_db=eta_f, eta_b_db=rc.options["eta_b"], fading=fading)


def _print_point(r: OperatingPointResult) -> None:
    print(
        f"{r.variant} eta_f={r.eta_f_db:g}dB thr={r.threshold:g} N={r.n_sessions}: "
        f"BLER={r.bler:.3e} [{r.bler_lo:.3e}, {r.bler_hi:.3e}] "
        f"rate={r.mean_rate:.4f} tau={r.mean_tau:.2f} power={r.mean_power:.4f}"
    )


def _run_train(rc: RunConfig) -> int:
    config = _train_config(rc)
    codec = None
    if rc.options["checkpoint"]:
        codec, _ = load_checkpoint(rc.options["checkpoint"])
    _, history = train_codec(config, codec=codec, out_dir=str(rc.out))
    final = history[-1] if history else {}
    print(
        f"trained {config.variant} for {len(history)} steps; "
        f"final loss {final.get('loss', float('nan')):.6g}; "
        f"checkpoint at {rc.out / 'checkpoint.npz'}"
    )
    return 0


def _run_eval(rc: RunConfig) -> int:
    codec, variant = _load_model(rc)
    result = evaluate_operating_point(
        codec,
        _channel(rc, rc.options["eta_f"]),
        variant=variant,
        n_sessions=rc.options["sessions"],
        seed=rc.seed,
        gamma=rc.options["gamma"],
        gamma_t=rc.options["gamma_t"],
        tau_max=rc.options["tau_max"],
        first_decode_round=rc.options["first_decode_round"],
        chunk_size=rc.options["chunk_size"],
    )
    emit_results([result], rc.out / "results.csv")
    _print_point(result)
    return 0


def _run_sweep(rc: RunConfig) -> int:
    codec, variant = _load_model(rc)
    gamma_list = rc.options["gamma_list"]
    eta_f_grid = rc.options["eta_f_grid"]
    if gamma_list and rc.options["eta_f"] is None:
        raise ConfigurationError("[sweep] missing required key 'eta_f' (fixed SNR for a gamma sweep)")
    base_eta = rc.options["eta_f"] if gamma_list else (eta_f_grid[0] if eta_f_grid else 0.0)
    results = sweep(
        codec,
        _channel(rc, base_eta),
        variant=variant,
        n_sessions=rc.options["sessions"],
        seed=rc.seed,
        gamma_list=gamma_list or None,
        eta_f_grid=eta_f_grid or None,
        gamma=rc.options["gamma"],
        gamma_t=rc.options["gamma_t"],
        tau_max=rc.options["tau_max"],
        first_decode_round=rc.options["first_decode_round"],
        chunk_size=rc.options["chunk_size"],
    )
    emit_results(results, rc.out / "sweep.csv")
    for r in results:
        _print_point(r)
    return 0


def _run_dynamics(rc: RunConfig) -> int:
    codec, _ = _load_model(rc)
    result = dynamics_experiment(
        codec,
        _channel(rc, rc.options["eta_f"]),
        rounds=rc.options["rounds"],
        n_trials=rc.options["trials"],
        seed=rc.seed,
        chunk_size=rc.options["chunk_size"],
    )
    emit_dynamics(result, rc.out / "dynamics.csv")
    for rd in result.rounds:
        print(f"round {rd}: separation {result.separation[rd]:.6g}")
    return 0


def _run_gradcheck(rc: RunConfig) -> int:
    report = gradient_check(
        draws=rc.options["draws"],
        fd_step=rc.options["fd_step"],
        seed=rc.seed,
        batch=rc.options["batch"],
        theta=rc.options["theta"],
        offset_c=rc.options["offset_c"],
        gate=rc.options["gate"],
    )
    summary = (
        f"max relative error {report.max_rel_error:.6e} over {report.draws} draws "
        f"({report.n_parameters} parameters); gate {report.gate:g}: "
        f"{'PASS' if report.passed else 'FAIL'}"
    )
    (rc.out / "gradcheck.txt").write_text(summary + "\n")
    print(summary)
    return 0 if report.passed else 4


_RUNNERS = {
    "train": _run_train,
    "eval": _run_eval,
    "sweep": _run_sweep,
    "dynamics": _run_dynamics,
    "gradcheck": _run_gradcheck,
}


def run(rc: RunConfig) -> int:
    """Write the manifest, then dispatch to the verb's runner."""
    rc.out.mkdir(parents=True, exist_ok=True)
    write_manifest(rc, rc.out / "manifest.ini")
    return _RUNNERS[rc.verb](rc)


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlfcode",
        description="Variable-length feedback codes: train and evaluate.",
    )
    parser.add_argument("verb", nargs="?", choices=VERBS, help="operation to run")
    parser.add_argument("--config", help="INI config file; flags override its values")
    flags = (
        "seed", "out", "checkpoint", "preset", "variant", "eta-f", "eta-b",
        "gamma", "gamma-t", "sessions", "steps", "batch-size", "lr", "dtype",
        "phase", "theta", "offset-c", "tau-max", "first-decode-round",
        "chunk-size", "trajectory", "trials", "rounds", "gamma-list",
        "eta-f-grid", "draws", "fd-step", "batch", "gate",
    )
    for name in flags:
        parser.add_argument(f"--{name}", dest=name.replace("-", "_"), metavar="V")
    return parser


def main(argv: list[str] | None = None) -> int:
    ns = _build_parser().parse_args(argv)
    overrides = {
        key: value
        for key, value in vars(ns).items()
        if key not in ("verb", "config") and value is not None
    }
    try:
        rc = parse_config(ns.config, overrides, verb=ns.verb)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(rc)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # categorized for scripting; traceback not useful here
        print(f"runtime error ({rc.verb}): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
