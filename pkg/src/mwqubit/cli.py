"""Command-line entry point: ``mwqubit <verb> --config run.json --out DIR``.

Verbs are ``simulate``, ``scan``, ``fit``, ``leakage`` and ``fidelity``.
Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as mio
from .core import DecayRates, NO_DECAY, khz_to_rad
from .diagnostics import FitError, fit_rabi_trace, fit_rotary_trace
from .dynamics import LeakageChannel, TimedTrace, leakage_populations
from .ensemble import (
    EnsembleSpec,
    SignalModel,
    average_population,
    average_sequence_population,
    synthesize_signal,
)
from .sequences import FAMILIES, PROPAGATOR, STATE, build_sequence, ensemble_gate_fidelity, robustness_scan

FORMATS = ("csv", "json", "svg")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# --- schema -------------------------------------------------------------------

_NUM = (int, float)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "drive": {"chi0_khz": _NUM, "delta0_khz": _NUM},
    "ensemble": {"dchi_rel": _NUM, "ddelta_rel": _NUM, "correlation": _NUM},
    "decay": {"tau_d_ms": _NUM, "gamma1_hz": _NUM, "gamma2_hz": _NUM},
    "signal": {"s1": _NUM, "s0": _NUM, "noise_sigma": _NUM},
    "numerics": {
        "quad_order": (int, str, list),
        "mc_samples": (int,),
        "ode_step_factor": _NUM,
        "seed": (int,),
        "samples_per_period": _NUM,
    },
    "sequence": {
        "family": (str,),
        "theta": _NUM,
        "repeats": (int,),
        "deliberate_f": _NUM,
        "deliberate_eps": _NUM,
        "duration_us": _NUM,
    },
    "scan": {"axis": (str,), "start": _NUM, "stop": _NUM, "num": (int,), "points": (list,)},
    "leakage": {"qubit_rabi_khz": _NUM, "gate_us": _NUM, "samples": (int,), "channels": (list,)},
    "fidelity": {"measure": (str,), "rabi_scale": _NUM},
}
_CHANNEL_KEYS = {"rabi_khz": _NUM, "detuning_khz": _NUM, "label": (str,)}


def _check_type(path: str, value, types: tuple):
    if isinstance(value, bool) or not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}: expected {names}, got {json.dumps(value)}")
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")


def validate_document(doc) -> dict:
    """Check section and key names and value types."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    for section, body in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section (allowed: {', '.join(sorted(_SCHEMA))})")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: must be a JSON object")
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            _check_type(f"{section}.{key}", value, _SCHEMA[section][key])
    for i, ch in enumerate(doc.get("leakage", {}).get("channels", [])):
        path = f"leakage.channels[{i}]"
        if not isinstance(ch, dict):
            raise ConfigError(f"{path}: must be a JSON object")
        for key, value in ch.items():
            if key not in _CHANNEL_KEYS:
                raise ConfigError(f"{path}.{key}: unknown key")
            _check_type(f"{path}.{key}", value, _CHANNEL_KEYS[key])
        for key in ("rabi_khz", "detuning_khz"):
            if key not in ch:
                raise ConfigError(f"{path}.{key}: required")
    for i, p in enumerate(doc.get("scan", {}).get("points", [])):
        _check_type(f"scan.points[{i}]", p, _NUM)
    return doc


@dataclass
class RunConfig:
    """Validated run parameters in internal (angular) units."""

    doc: dict
    spec: EnsembleSpec
    decay: DecayRates
    signal: SignalModel
    seed: int | None
    quad_order: object
    mc_samples: int
    step_factor: float
    samples_per_period: float
    family: str
    theta: float
    repeats: int
    deliberate_f: float
    deliberate_eps: float
    duration: float | None
    extra: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.doc.get(name, {})

    @property
    def method(self) -> str:
        return "montecarlo" if self.mc_samples > 0 else "quadrature"

    @property
    def shifted_spec(self) -> EnsembleSpec:
        return self.spec.shifted(self.deliberate_f, self.deliberate_eps)


def _field(path: str, fn, *args):
    try:
        return fn(*args)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _decay_from(sec: dict) -> DecayRates:
    if "tau_d_ms" in sec and ({"gamma1_hz", "gamma2_hz"} & sec.keys()):
        raise ConfigError("decay: give either tau_d_ms or gamma1_hz/gamma2_hz, not both")
    if "tau_d_ms" in sec:
        tau = sec["tau_d_ms"]
        if tau == 0 or math.isinf(tau):
            return NO_DECAY
        if tau < 0:
            raise ConfigError("decay.tau_d_ms: must be > 0")
        return DecayRates.from_tau_d(tau * 1e-3)
    return _field("decay", DecayRates, float(sec.get("gamma1_hz", 0.0)), float(sec.get("gamma2_hz", 0.0)))


def _quad_order(value):
    if value == "auto" or value is None:
        return None
    if isinstance(value, int) and value >= 1:
        return value
    if isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value):
        return tuple(value)
    raise ConfigError("numerics.quad_order: must be 'auto', a positive int or a pair of them")


def build_config(doc: dict, seed_override: int | None = None) -> RunConfig:
    validate_document(doc)
    drive = doc.get("drive", {})
    if "chi0_khz" not in drive:
        raise ConfigError("drive.chi0_khz: required")
    if not drive["chi0_khz"] > 0:
        raise ConfigError("drive.chi0_khz: must be > 0")
    ens = doc.get("ensemble", {})
    for key in ("dchi_rel", "ddelta_rel"):
        if ens.get(key, 0.0) < 0:
            raise ConfigError(f"ensemble.{key}: must be >= 0")
    chi0 = khz_to_rad(drive["chi0_khz"])
    spec = _field(
        "ensemble",
        EnsembleSpec,
        chi0,
        khz_to_rad(drive.get("delta0_khz", 0.0)),
        ens.get("dchi_rel", 0.0) * chi0,
        ens.get("ddelta_rel", 0.0) * chi0,
        float(ens.get("correlation", 0.0)),
    )
    decay = _decay_from(doc.get("decay", {}))
    sig = doc.get("signal", {})
    if sig.get("noise_sigma", 0.0) < 0:
        raise ConfigError("signal.noise_sigma: must be >= 0")
    signal = SignalModel(float(sig.get("s1", 1.0)), float(sig.get("s0", 0.0)), float(sig.get("noise_sigma", 0.0)))
    num = doc.get("numerics", {})
    seed = seed_override if seed_override is not None else num.get("seed")
    if seed is not None and seed < 0:
        raise ConfigError("numerics.seed: must be a non-negative integer")
    mc = num.get("mc_samples", 0)
    if mc < 0 or mc == 1:
        raise ConfigError("numerics.mc_samples: must be 0 (quadrature) or >= 2")
    if seed is None and (signal.noise_sigma > 0 or mc > 0):
        raise ConfigError("numerics.seed: required when noise or Monte Carlo averaging is enabled (or pass --seed)")
    step_factor = num.get("ode_step_factor", None)
    if step_factor is not None and not step_factor > 0:
        raise ConfigError("numerics.ode_step_factor: must be > 0")
    spp = num.get("samples_per_period", None)
    if spp is not None and not spp > 0:
        raise ConfigError("numerics.samples_per_period: must be > 0")
    seq = doc.get("sequence", {})
    family = seq.get("family", "plain")
    if family not in FAMILIES:
        raise ConfigError(f"sequence.family: unknown family {family!r} (choose from {', '.join(FAMILIES)})")
    theta = float(seq.get("theta", 1.0))
    if not theta > 0:
        raise ConfigError("sequence.theta: must be > 0 (units of pi)")
    repeats = seq.get("repeats", 1)
    if repeats < 1:
        raise ConfigError("sequence.repeats: must be >= 1")
    duration = seq.get("duration_us")
    if duration is not None and not duration > 0:
        raise ConfigError("sequence.duration_us: must be > 0")
    from .dynamics import SAMPLES_PER_PERIOD, STEP_FACTOR

    return RunConfig(
        doc=doc,
        spec=spec,
        decay=decay,
        signal=signal,
        seed=seed,
        quad_order=_quad_order(num.get("quad_order", "auto")),
        mc_samples=mc,
        step_factor=float(step_factor or STEP_FACTOR),
        samples_per_period=float(spp or SAMPLES_PER_PERIOD),
        family=family,
        theta=theta * math.pi,
        repeats=repeats,
        deliberate_f=float(seq.get("deliberate_f", 0.0)),
        deliberate_eps=float(seq.get("deliberate_eps", 0.0)),
        duration=None if duration is None else duration * 1e-6,
    )


def load_config(path, seed_override: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return build_config(doc, seed_override)


# --- commands -----------------------------------------------------------------

def _order_or_default(cfg: RunConfig):
    from .ensemble import DEFAULT_ORDER

    return cfg.quad_order if cfg.quad_order is not None else DEFAULT_ORDER


def _finite(obj):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(_finite(doc), sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def simulate(cfg: RunConfig) -> tuple[TimedTrace, TimedTrace]:
    """Ensemble population and signal traces for the configured drive."""
    spec = cfg.shifted_spec
    if cfg.family == "plain" and cfg.duration is not None:
        # continuous resonant drive: closed-form member populations
        peak = math.hypot(spec.chi0 + 4 * spec.dchi, abs(spec.delta0) + 4 * spec.ddelta)
        n = int(math.ceil(cfg.duration * peak / (2 * math.pi) * cfg.samples_per_period)) + 1
        times = np.linspace(0.0, cfg.duration, max(n, 2))
        pop = average_population(
            times, spec, cfg.decay, method=cfg.method, order=cfg.quad_order, samples=cfg.mc_samples or 2, seed=cfg.seed
        )
    else:
        if cfg.duration is not None:
            raise ConfigError("sequence.duration_us: only meaningful for the plain family")
        seq = build_sequence(cfg.family, cfg.theta, cfg.spec.chi0, cfg.repeats)
        pop = average_sequence_population(
            seq,
            spec,
            cfg.decay,
            method=cfg.method,
            order=_order_or_default(cfg),
            samples=cfg.mc_samples or 2,
            seed=cfg.seed,
            samples_per_period=cfg.samples_per_period,
            step_factor=cfg.step_factor,
        )
    sig = synthesize_signal(pop, cfg.signal, cfg.seed)
    return pop, sig


def cmd_simulate(cfg: RunConfig, out: Path, fmt: str) -> list[Path]:
    pop, sig = simulate(cfg)
    meta = {k: v for k, v in sorted(pop.meta.items()) if not isinstance(v, dict)}
    meta.update(family=cfg.family, s1=cfg.signal.s1, s0=cfg.signal.s0, noise_sigma=cfg.signal.noise_sigma)
    if fmt == "json":
        doc = {"meta": meta, "time_s": pop.times.tolist(), "population": pop.values.tolist(), "signal": sig.values.tolist()}
        return [_write_json(out / "trace.json", doc)]
    path = out / "trace.csv"
    mio.write_table_csv(path, ["time_s", "population", "signal"], zip(pop.times.tolist(), pop.values.tolist(), sig.values.tolist()), meta)
    written = [path]
    if fmt == "svg":
        svg = mio.svg_line_plot([("signal", pop.times * 1e3, sig.values)], "time (ms)", "S(t)", f"{cfg.family} drive")
        (out / "trace.svg").write_text(svg)
        written.append(out / "trace.svg")
    return written


def scan_points(cfg: RunConfig) -> tuple[str, list[float]]:
    sec = cfg.section("scan")
    axis = sec.get("axis", "detuning")
    if axis not in ("detuning", "angle"):
        raise ConfigError("scan.axis: must be 'detuning' or 'angle'")
    if "points" in sec:
        if {"start", "stop", "num"} & sec.keys():
            raise ConfigError("scan: give either points or start/stop/num")
        points = [float(p) for p in sec["points"]]
    else:
        num = sec.get("num", 101)
        if num < 1:
            raise ConfigError("scan.num: must be >= 1")
        points = np.linspace(float(sec.get("start", -0.5)), float(sec.get("stop", 0.5)), num).tolist()
    if not points:
        raise ConfigError("scan.points: robustness scan needs at least one error point")
    return axis, points


def _measure(cfg: RunConfig):
    name = cfg.section("fidelity").get("measure", "state_overlap")
    table = {"state_overlap": STATE, "propagator_overlap": PROPAGATOR}
    if name not in table:
        raise ConfigError("fidelity.measure: must be 'state_overlap' or 'propagator_overlap'")
    return table[name]


def cmd_scan(cfg: RunConfig, out: Path, fmt: str) -> list[Path]:
    axis, points = scan_points(cfg)
    table = robustness_scan(
        cfg.family,
        axis,
        points,
        cfg.spec,
        cfg.decay if not cfg.decay.is_zero else None,
        _measure(cfg),
        cfg.theta,
        order=_order_or_default(cfg),
        step_factor=cfg.step_factor,
    )
    stem = f"scan_{cfg.family}_{axis}"
    meta = {"family": cfg.family, "axis": axis, "measure": _measure(cfg).kind}
    if fmt == "json":
        doc = {"meta": meta, "error_value": table.errors.tolist(), "fidelity": table.fidelities.tolist()}
        return [_write_json(out / f"{stem}.json", doc)]
    path = out / f"{stem}.csv"
    mio.write_table_csv(path, ["error_value", "fidelity"], table.rows(), meta)
    written = [path]
    if fmt == "svg":
        label = "f" if axis == "detuning" else "eps"
        svg = mio.svg_line_plot([(cfg.family, table.errors, table.fidelities)], label, "fidelity", f"{cfg.family} {axis} scan")
        (out / f"{stem}.svg").write_text(svg)
        written.append(out / f"{stem}.svg")
    return written


def read_trace(path) -> TimedTrace:
    """Trace CSV with a time column and either ``signal`` or ``value``."""
    try:
        meta, header, rows = mio.read_table_csv(path)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read trace ({exc.strerror})") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "time_s" not in header:
        raise ConfigError(f"{path}: missing time_s column")
    col = next((c for c in ("signal", "value", "population") if c in header), None)
    if col is None:
        raise ConfigError(f"{path}: need a signal, value or population column")
    try:
        data = np.array([[float(r[header.index("time_s")]), float(r[header.index(col)])] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from None
    if data.size == 0:
        raise ConfigError(f"{path}: no data rows")
    try:
        return TimedTrace(data[:, 0], data[:, 1], meta)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_fit(cfg: RunConfig | None, trace_path, out: Path, rotary: bool = False) -> list[Path]:
    trace = read_trace(trace_path)
    if rotary:
        fit = fit_rotary_trace(trace)
        doc = fit.to_json()
    else:
        decay = cfg.decay if cfg is not None else NO_DECAY
        guess = None
        if cfg is not None and "drive" in cfg.doc:
            sp = cfg.spec
            guess = [sp.chi0, sp.delta0, sp.dchi, sp.ddelta, cfg.signal.s1, cfg.signal.s0]
        order = cfg.quad_order if cfg is not None else None
        fit = fit_rabi_trace(trace, decay, guess, order)
        doc = fit.to_json()
    path = _write_json(out / "fit.json", doc)
    if not doc.get("converged", True):
        raise FitError(f"fit did not converge (see {path})")
    return [path]


def cmd_leakage(cfg: RunConfig, out: Path, fmt: str) -> list[Path]:
    sec = cfg.section("leakage")
    qubit = khz_to_rad(sec["qubit_rabi_khz"]) if "qubit_rabi_khz" in sec else cfg.spec.chi0
    gate = sec["gate_us"] * 1e-6 if "gate_us" in sec else math.pi / qubit
    if not gate > 0 or not qubit > 0:
        raise ConfigError("leakage: gate_us and qubit_rabi_khz must be > 0")
    samples = sec.get("samples", 2001)
    if samples < 2:
        raise ConfigError("leakage.samples: must be >= 2")
    channels = [
        LeakageChannel(khz_to_rad(c["rabi_khz"]), khz_to_rad(c["detuning_khz"]), c.get("label", f"channel{i}"))
        for i, c in enumerate(sec.get("channels", []))
    ]
    res = leakage_populations(qubit, gate, channels, samples)
    summary = {
        "gate_time_s": gate,
        "qubit_rabi_hz_cyclic": qubit / (2 * math.pi),
        "channels": [c.label for c in channels],
        "max_combined": res.max_combined,
        "final_combined": res.final_combined,
        "max_per_channel": res.per_channel.max(axis=0).tolist() if channels else [],
    }
    written = [_write_json(out / "leakage.json", summary)]
    if fmt != "json":
        path = out / "leakage.csv"
        header = ["time_s", "combined"] + [f"leak_{c.label}" for c in channels]
        rows = (
            [t, c, *p]
            for t, c, p in zip(res.times.tolist(), res.combined.tolist(), res.per_channel.tolist())
        )
        mio.write_table_csv(path, header, rows, {"quantity": "leaked_population"})
        written.append(path)
    return written


def fidelity_report(cfg: RunConfig) -> dict:
    sec = cfg.section("fidelity")
    scale = float(sec.get("rabi_scale", 1.0))
    if not scale > 0:
        raise ConfigError("fidelity.rabi_scale: must be > 0")
    base = cfg.shifted_spec
    # drive power scaling: the Rabi rate and its spread scale, detunings do not
    spec = EnsembleSpec(base.chi0 * scale, base.delta0, base.dchi * scale, base.ddelta, base.correlation)
    seq = build_sequence(cfg.family, cfg.theta, spec.chi0, cfg.repeats)
    measure = _measure(cfg)
    decay = None if cfg.decay.is_zero else cfg.decay
    fid = ensemble_gate_fidelity(
        seq,
        spec,
        decay,
        measure,
        order=_order_or_default(cfg),
        method=cfg.method,
        samples=cfg.mc_samples or 2,
        seed=cfg.seed,
        step_factor=cfg.step_factor,
    )
    report = {
        "family": cfg.family,
        "measure": measure.kind,
        "rabi_scale": scale,
        "chi0_hz_cyclic": spec.chi0 / (2 * math.pi),
        "gate_time_s": seq.total_duration,
        "fidelity": fid,
    }
    if cfg.family == "plain" and math.isclose(cfg.theta, math.pi):
        pop = average_population(np.array([seq.total_duration]), spec, cfg.decay, order=cfg.quad_order)
        report["closed_form_population"] = float(pop.values[0])
    return report


def cmd_fidelity(cfg: RunConfig, out: Path) -> list[Path]:
    return [_write_json(out / "fidelity.json", fidelity_report(cfg))]


# --- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, help="RNG seed (overrides numerics.seed)")
    common.add_argument("--format", choices=FORMATS, default="csv", help="output format")
    p = argparse.ArgumentParser(prog="mwqubit", description="Microwave-driven qubit ensemble simulations.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("simulate", parents=[common], help="ensemble population and signal traces")
    sub.add_parser("scan", parents=[common], help="fidelity versus a deliberate error")
    fit = sub.add_parser("fit", parents=[common], help="fit a trace CSV")
    fit.add_argument("trace", help="trace CSV (time_s plus signal or value column)")
    fit.add_argument("--rotary", action="store_true", help="zero-spread rotary-echo model")
    sub.add_parser("leakage", parents=[common], help="population leaked to non-qubit levels")
    sub.add_parser("fidelity", parents=[common], help="ensemble gate fidelity report")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed: must be a non-negative integer")
        if args.config is None and args.verb != "fit":
            raise ConfigError(f"{args.verb}: --config is required")
        cfg = load_config(args.config, args.seed) if args.config else None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "simulate":
            written = cmd_simulate(cfg, out, args.format)
        elif args.verb == "scan":
            written = cmd_scan(cfg, out, args.format)
        elif args.verb == "fit":
            written = cmd_fit(cfg, args.trace, out, args.rotary)
        elif args.verb == "leakage":
            written = cmd_leakage(cfg, out, args.format)
        else:
            written = cmd_fidelity(cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
