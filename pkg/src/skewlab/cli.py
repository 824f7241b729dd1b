"""Deterministic experiment front end with archived JSON-line records.

Each subcommand wraps one analysis pipeline: it measures named quantities,
judges them against configured tolerances, and appends one record per
experiment to the output stream.  Records carry the full configuration
snapshot, so a run can be reproduced from its own output; all sampling is
keyed by (seed, counter), so repeat runs on one build produce identical
records apart from wall-clock durations.

Exit codes: 0 when every verdict passes, 1 on a failed verdict or a hard
experiment failure (the stage id goes to stderr), 2 for invalid
configuration or an unknown subcommand (nothing is written).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from . import __version__
from .bundles import lyapunov_batch, transversality_check, volume_defect
from .cones import ConeSpec, center_expansion_sweep, cone_invariance_sweep, in_good_region
from .curves import BoxSet, extract_cone_subcurves, iterate_center_curve, make_center_curve
from .leaves import (
    good_fraction,
    heteroclinic_center,
    holonomy_defect_grid,
    leaf_point,
    leaf_seed_segment,
    line_parameter,
    persistent_good_point,
    sweep_rate,
    sweep_threshold,
)
from .mixing import SPAN_LEN, mixing_intersection, mixing_threshold
from .precision import derive_rng
from .skewmap import MapParams, iterate, make_params, orbit_angles
from .torus import DEFAULT_BITS, TWO_PI, TorusPoint, random_point

EXPERIMENTS = ("orbit", "lyapunov", "cones", "bundle", "pinch", "good-fraction",
               "good-point", "curve-grow", "heteroclinic", "holonomy", "mix")

SWEEP_AXES = ("N", "epsilon", "seed")

# experiments riding strong-leaf charts or center curves need the exact base
# skew, so their perturbations are calibrated in fiber mode
FIBER_MODE_EXPERIMENTS = frozenset({
    "good-fraction", "good-point", "curve-grow", "heteroclinic", "holonomy",
    "mix",
})

DEFAULT_TOLERANCES = {
    "pinch": {"band": 1e-7},
    "lyapunov": {"edge": 1e-3, "sum_defect": 1e-6},
    "cones": {"alpha": 0.1},
    "bundle": {"volume": 1e-8},
    "good-fraction": {"fraction": 0.05},
    "good-point": {},
    "curve-grow": {"refine": 0.01},
    "heteroclinic": {"residual": 1e-6},
    "holonomy": {"defect": 0.1},
    "mix": {"fiber": 1e-3},
    "orbit": {},
}

_KNOWN_TOLERANCES = frozenset(
    name for tols in DEFAULT_TOLERANCES.values() for name in tols)

_CONFIG_FILE_KEYS = frozenset({
    "N", "matrix", "epsilon", "seed", "bits", "out", "samples", "horizon",
    "tol", "box", "csv", "axis", "values",
})

_MAX_BITS = 1 << 14


class ConfigError(ValueError):
    """Configuration rejected before any experiment ran."""


# ---------------------------------------------------------------------------
# configuration and record types


@dataclass(frozen=True)
class RunConfig:
    """Validated run parameters, serialized verbatim into every record."""

    n: float = 8.0
    matrix: tuple[int, int, int, int] = (2, 1, 1, 1)
    epsilon: float = 0.0
    seed: int = 0
    precision_bits: int = DEFAULT_BITS
    tolerances: tuple[tuple[str, float], ...] = ()
    output_path: str = ""

    def tolerance_map(self) -> dict[str, float]:
        return dict(self.tolerances)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "matrix": list(self.matrix),
            "epsilon": self.epsilon,
            "seed": self.seed,
            "precision_bits": self.precision_bits,
            "tolerances": self.tolerance_map(),
            "output_path": self.output_path,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        return cls(n=float(data["n"]),
                   matrix=tuple(int(v) for v in data["matrix"]),
                   epsilon=float(data["epsilon"]),
                   seed=int(data["seed"]),
                   precision_bits=int(data["precision_bits"]),
                   tolerances=tuple(sorted(
                       (str(k), float(v))
                       for k, v in data["tolerances"].items())),
                   output_path=str(data["output_path"]))


@dataclass(frozen=True)
class ExperimentRecord:
    experiment: str
    config: RunConfig
    quantities: dict
    verdicts: dict
    duration_s: float
    version: str

    def to_json(self) -> dict:
        # numpy scalars leak out of comparisons; records hold plain JSON types
        return {
            "experiment": self.experiment,
            "config": self.config.to_json(),
            "quantities": {k: {"value": float(q["value"]),
                               "tol": None if q["tol"] is None
                               else float(q["tol"])}
                           for k, q in self.quantities.items()},
            "verdicts": {k: bool(v) for k, v in self.verdicts.items()},
            "duration_s": self.duration_s,
            "version": self.version,
        }

    def passed(self) -> bool:
        return all(self.verdicts.values())


@dataclass(frozen=True)
class ExperimentOptions:
    """Per-invocation knobs that are not part of the archived RunConfig."""

    samples: int | None = None
    horizon: int | None = None
    box: BoxSet | None = None
    csv_path: str | None = None


@dataclass(frozen=True)
class RunOutcome:
    quantities: dict
    verdicts: dict
    rows: list | None = None


def record_schema() -> dict:
    """Parsed JSON schema that every emitted record satisfies."""
    text = resources.files("skewlab").joinpath("record_schema.json").read_text()
    return json.loads(text)


def quantity(value, tol: float | None = None) -> dict:
    return {"value": float(value), "tol": None if tol is None else float(tol)}


def _tolerances_for(experiment: str, config: RunConfig) -> dict[str, float]:
    merged = dict(DEFAULT_TOLERANCES[experiment])
    merged.update(config.tolerance_map())
    return merged


def _params_for(config: RunConfig, experiment: str) -> MapParams:
    entries = ((config.matrix[0], config.matrix[1]),
               (config.matrix[2], config.matrix[3]))
    mode = "fiber" if experiment in FIBER_MODE_EXPERIMENTS else "mixed"
    return make_params(config.n, entries, config.epsilon, config.seed,
                       config.precision_bits, mode)


# ---------------------------------------------------------------------------
# experiment runners


def _run_orbit(params: MapParams, config: RunConfig,
               opts: ExperimentOptions) -> RunOutcome:
    steps = opts.horizon or 1000
    m = random_point(derive_rng(config.seed, 11), config.precision_bits)
    there = iterate(params, m, steps)
    back = iterate(params, there, -steps)
    track = orbit_angles(params, m, min(steps, 512))
    rows = [{"step": i, "x": r[0], "y": r[1], "z": r[2], "w": r[3]}
            for i, r in enumerate(track)]
    return RunOutcome(
        quantities={"steps": quantity(steps)},
        verdicts={"base_roundtrip": back.base == m.base},
        rows=rows)


def _run_lyapunov(params: MapParams, config: RunConfig,
                  opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("lyapunov", config)
    horizon = opts.horizon or 1000
    count = opts.samples or 4
    pts = [random_point(derive_rng(config.seed, 13, i), config.precision_bits)
           for i in range(count)]
    reports = lyapunov_batch(params, pts, horizon)
    exps = np.array([r.exponents for r in reports])
    edge = params.k_base * math.log(params.matrix.mu)
    worst_sum = max(r.sum_defect for r in reports)
    rows = [{"point": i, "chi1": r.exponents[0], "chi2": r.exponents[1],
             "chi3": r.exponents[2], "chi4": r.exponents[3]}
            for i, r in enumerate(reports)]
    means = exps.mean(axis=0)
    return RunOutcome(
        quantities={
            "chi1_mean": quantity(means[0], tols["edge"]),
            "chi2_mean": quantity(means[1]),
            "chi3_mean": quantity(means[2]),
            "chi4_mean": quantity(means[3], tols["edge"]),
            "edge_analytic": quantity(edge),
            "sum_defect_max": quantity(worst_sum, tols["sum_defect"]),
            "horizon": quantity(horizon),
            "points": quantity(count),
        },
        verdicts={
            "top_edge": bool(np.abs(exps[:, 0] - edge).max() <= tols["edge"]),
            "bottom_edge": bool(np.abs(exps[:, 3] + edge).max() <= tols["edge"]),
            "volume_sum": worst_sum <= tols["sum_defect"],
        },
        rows=rows)


def _run_cones(params: MapParams, config: RunConfig,
               opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("cones", config)
    count = opts.samples or 10_000
    quantities = {"samples": quantity(count), "alpha": quantity(tols["alpha"])}
    verdicts = {}
    for kind in ("unstable", "stable"):
        report = cone_invariance_sweep(params, ConeSpec(kind, tols["alpha"]),
                                       count, config.seed)
        quantities[f"worst_ratio_{kind}"] = quantity(report.worst_ratio,
                                                     tols["alpha"])
        verdicts[f"{kind}_invariant"] = report.passed
    return RunOutcome(quantities=quantities, verdicts=verdicts)


def _run_bundle(params: MapParams, config: RunConfig,
                opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("bundle", config)
    count = opts.samples or 10_000
    expansion = center_expansion_sweep(params, count, config.seed)
    defect = volume_defect(params, count, config.seed)
    return RunOutcome(
        quantities={
            "min_growth": quantity(expansion.min_growth),
            "growth_floor": quantity(math.sqrt(params.n)),
            "violations": quantity(expansion.violations),
            "volume_defect": quantity(defect, tols["volume"]),
            "samples": quantity(count),
        },
        verdicts={
            "center_expansion": expansion.passed,
            "volume_preserved": defect <= tols["volume"],
        })


def _run_pinch(params: MapParams, config: RunConfig,
               opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("pinch", config)
    count = opts.samples or 1000
    report = transversality_check(params, count, config.seed, tol=tols["band"])
    return RunOutcome(
        quantities={
            "center_u": quantity(report.center_u, report.halfwidth),
            "center_s": quantity(report.center_s, report.halfwidth),
            "ratio_u_lo": quantity(report.ratios_u[0]),
            "ratio_u_hi": quantity(report.ratios_u[1]),
            "ratio_s_lo": quantity(report.ratios_s[0]),
            "ratio_s_hi": quantity(report.ratios_s[1]),
            "halfwidth": quantity(report.halfwidth),
            "samples": quantity(count),
        },
        verdicts={"pinch_band": report.passed})


def _good_seed_segment(params: MapParams, config: RunConfig):
    anchor = random_point(derive_rng(config.seed, 17), config.precision_bits)
    return leaf_seed_segment(params, anchor, "uu", 5.0)


def _run_good_fraction(params: MapParams, config: RunConfig,
                       opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("good-fraction", config)
    seg = _good_seed_segment(params, config)
    # smallest step count whose image clears the sweep threshold with a
    # factor-8 margin, so the measuring window spans full coordinate wraps
    need = math.log(8.0 * sweep_threshold(params, "uu")) \
        - math.log(seg.span[1] - seg.span[0])
    per_step = params.k_base * math.log(params.matrix.mu)
    n_steps = max(1, int(math.ceil(need / per_step)))
    fraction = good_fraction(params, seg, n_steps)
    equi = 1.0 - (8.0 / TWO_PI) * params.n ** -0.3
    literal = 1.0 - 10.0 * params.n ** -0.3
    return RunOutcome(
        quantities={
            "fraction": quantity(fraction, tols["fraction"]),
            "equidistribution": quantity(equi),
            "literal_bound": quantity(literal),
            "n_steps": quantity(n_steps),
        },
        verdicts={
            "equidistribution": abs(fraction - equi) <= tols["fraction"],
            "literal_bound": fraction >= literal,
        })


def _run_good_point(params: MapParams, config: RunConfig,
                    opts: ExperimentOptions) -> RunOutcome:
    horizon = opts.horizon or 8
    seg = _good_seed_segment(params, config)
    point, n_u = persistent_good_point(params, seg, horizon)
    current = point
    persistent = True
    for k in range(horizon + 1):
        if k >= n_u and not in_good_region(params.n, current, "u"):
            persistent = False
            break
        current = iterate(params, current, 1)
    return RunOutcome(
        quantities={"n_u": quantity(n_u), "horizon": quantity(horizon)},
        verdicts={"persistent": persistent})


def _run_curve_grow(params: MapParams, config: RunConfig,
                    opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("curve-grow", config)
    seg = _good_seed_segment(params, config)
    point, n_u = persistent_good_point(params, seg, opts.horizon or 6)
    center = iterate(params, point, n_u)
    curve = make_center_curve(params, center, params.n ** -0.3, "horizontal")
    image = iterate_center_curve(params, curve, 1, delta=0.02)
    subcurves = extract_cone_subcurves(image, "horizontal", params.theta(),
                                       SPAN_LEN)
    span = max((c.arclength() for c in subcurves), default=0.0)
    finer = iterate_center_curve(params, curve, 1, delta=0.01)
    drift = abs(image.arclength() - finer.arclength()) / finer.arclength()
    return RunOutcome(
        quantities={
            "span": quantity(span),
            "span_floor": quantity(SPAN_LEN),
            "image_arclength": quantity(image.arclength()),
            "refine_drift": quantity(drift, tols["refine"]),
            "n_u": quantity(n_u),
        },
        verdicts={
            "span": span >= SPAN_LEN,
            "refine_stable": drift <= tols["refine"],
        })


def _run_heteroclinic(params: MapParams, config: RunConfig,
                      opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("heteroclinic", config)
    p = random_point(derive_rng(config.seed, 19), config.precision_bits)
    q = random_point(derive_rng(config.seed, 23), config.precision_bits)
    hc = heteroclinic_center(params, p, q, radius=12.0)
    return RunOutcome(
        quantities={
            "slide_u": quantity(hc.t),
            "slide_s": quantity(hc.s),
            "radius": quantity(hc.radius),
            "base_residual": quantity(hc.base_residual, tols["residual"]),
        },
        verdicts={"residual": hc.base_residual <= tols["residual"]})


def _run_holonomy(params: MapParams, config: RunConfig,
                  opts: ExperimentOptions) -> RunOutcome:
    tols = _tolerances_for("holonomy", config)
    grid_n = opts.samples or 20
    p = TorusPoint.from_angles(1.0, 2.0, 0.3, 0.8, config.precision_bits)
    q = leaf_point(params, p, "ss", 3.0)
    slide = line_parameter(params, p, q, "s")
    defect = holonomy_defect_grid(params, p, q, "s", grid_n)
    bound = 2.0 * sweep_rate(params, "ss") * abs(slide)
    return RunOutcome(
        quantities={
            "slide": quantity(slide),
            "defect": quantity(defect, tols["defect"]),
            "slope_bound": quantity(bound),
            "grid": quantity(grid_n),
        },
        verdicts={
            "defect": defect <= tols["defect"],
            "slope_bound": defect <= bound,
        })


def _run_mix(params: MapParams, config: RunConfig,
             opts: ExperimentOptions) -> RunOutcome:
    box = opts.box or BoxSet(
        TorusPoint.from_angles(math.pi, math.pi, math.pi, math.pi,
                               config.precision_bits),
        (math.pi / 2,) * 4)
    threshold = mixing_threshold(params, box)
    n = opts.horizon or threshold
    # an explicit fiber tolerance overrides the module policy (1e-3
    # unperturbed, ten times epsilon with a perturbation on)
    explicit = config.tolerance_map().get("fiber")
    report = mixing_intersection(params, box, box, n, fiber_tol=explicit)
    return RunOutcome(
        quantities={
            "n": quantity(n),
            "threshold": quantity(threshold),
            "crossing_residual": quantity(report.crossing_residual,
                                          report.fiber_tol),
            "base_residual": quantity(report.base_residual),
            "back_margin": quantity(report.back_margin),
            "fwd_margin": quantity(report.fwd_margin),
            "saturation_margin": quantity(report.saturation_margin),
            "span_u": quantity(report.span_u),
            "span_s": quantity(report.span_s),
            "fiber_tol": quantity(report.fiber_tol),
        },
        verdicts={
            "backward_in_source": report.back_margin > 0.0,
            "forward_in_target": report.fwd_margin > 0.0,
            "saturated": report.saturation_margin > 0.0,
        })


_RUNNERS = {
    "orbit": _run_orbit,
    "lyapunov": _run_lyapunov,
    "cones": _run_cones,
    "bundle": _run_bundle,
    "pinch": _run_pinch,
    "good-fraction": _run_good_fraction,
    "good-point": _run_good_point,
    "curve-grow": _run_curve_grow,
    "heteroclinic": _run_heteroclinic,
    "holonomy": _run_holonomy,
    "mix": _run_mix,
}


# ---------------------------------------------------------------------------
# record persistence


class RecordWriter:
    """Single writer for the JSON-lines stream and the optional CSV dump.

    Records are flushed line by line so an aborted sweep still leaves every
    completed record on disk.  CSV rows must share one key set per
    invocation; the header comes from the first emitted row.
    """

    def __init__(self, path: str, csv_path: str | None):
        self._owns = bool(path)
        self._fh = open(path, "a", encoding="utf-8") if path else sys.stdout
        self._csv_path = csv_path
        self._csv_fh = None
        self._csv_writer = None

    def record(self, rec: ExperimentRecord) -> None:
        line = json.dumps(rec.to_json(), sort_keys=True, allow_nan=False)
        self._fh.write(line + "\n")
        self._fh.flush()

    def rows(self, experiment: str, outcome: RunOutcome) -> None:
        if self._csv_path is None:
            return
        rows = outcome.rows
        if not rows:
            rows = [{name: q["value"]
                     for name, q in sorted(outcome.quantities.items())}]
        for row in rows:
            tagged = {"experiment": experiment, **row}
            if self._csv_writer is None:
                self._csv_fh = open(self._csv_path, "w", encoding="utf-8",
                                    newline="")
                self._csv_writer = csv.DictWriter(self._csv_fh,
                                                  fieldnames=list(tagged))
                self._csv_writer.writeheader()
            self._csv_writer.writerow(tagged)
        if self._csv_fh is not None:
            self._csv_fh.flush()

    def close(self) -> None:
        if self._owns:
            self._fh.close()
        if self._csv_fh is not None:
            self._csv_fh.close()


def run_experiment(name: str, config: RunConfig,
                   opts: ExperimentOptions) -> tuple[ExperimentRecord, RunOutcome]:
    """Execute one experiment and wrap its outcome in a record."""
    params = _params_for(config, name)
    start = time.monotonic()
    outcome = _RUNNERS[name](params, config, opts)
    duration = time.monotonic() - start
    record = ExperimentRecord(experiment=name, config=config,
                              quantities=outcome.quantities,
                              verdicts=outcome.verdicts,
                              duration_s=duration, version=__version__)
    return record, outcome


# ---------------------------------------------------------------------------
# argument handling


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON file mirroring the flags; flags override")
    common.add_argument("--N", dest="n", type=float, help="twist parameter")
    common.add_argument("--matrix", nargs=4, type=int,
                        metavar=("A", "B", "C", "D"),
                        help="base matrix rows a b / c d")
    common.add_argument("--epsilon", type=float, help="perturbation size")
    common.add_argument("--seed", type=int, help="master sampling seed")
    common.add_argument("--bits", type=int, help="base lattice bit width")
    common.add_argument("--out", metavar="PATH",
                        help="JSON-lines record file (default: stdout)")
    common.add_argument("--samples", type=int, help="sample count override")
    common.add_argument("--horizon", type=int, help="step count override")
    common.add_argument("--tol", action="append", default=[],
                        metavar="NAME=VALUE", help="tolerance override")
    common.add_argument("--box", metavar="CX,CY,CZ,CW,HX,HY,HZ,HW",
                        help="box center and half sides")
    common.add_argument("--csv", metavar="PATH",
                        help="per-sample CSV dump")
    parser = argparse.ArgumentParser(
        prog="skewlab",
        description="Experiment laboratory for twisted skew products on T^4.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    sweep = sub.add_parser("sweep", parents=[common])
    sweep.add_argument("experiment", choices=EXPERIMENTS)
    sweep.add_argument("--axis", choices=SWEEP_AXES)
    sweep.add_argument("--values", metavar="V1,V2,...")
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(data) - _CONFIG_FILE_KEYS)
    if unknown:
        raise ConfigError(f"unknown config file keys: {', '.join(unknown)}")
    return data


def _parse_tolerances(entries, file_tols) -> dict[str, float]:
    tols = {}
    if file_tols is not None:
        if not isinstance(file_tols, dict):
            raise ConfigError("config file key 'tol' must map names to reals")
        tols.update({str(k): v for k, v in file_tols.items()})
    for entry in entries:
        name, sep, value = entry.partition("=")
        if not sep or not name:
            raise ConfigError(f"tolerance must be NAME=VALUE, got {entry!r}")
        tols[name] = value
    out = {}
    for name, value in tols.items():
        if name not in _KNOWN_TOLERANCES:
            raise ConfigError(f"unknown tolerance {name!r}; known: "
                              f"{', '.join(sorted(_KNOWN_TOLERANCES))}")
        try:
            val = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"tolerance {name} must be a real, "
                              f"got {value!r}") from exc
        if not math.isfinite(val) or val <= 0.0:
            raise ConfigError(f"tolerance {name} must be positive and finite")
        out[name] = val
    return out


def _parse_box(spec, bits: int) -> BoxSet:
    if isinstance(spec, str):
        parts = spec.split(",")
    else:
        parts = list(spec)
    if len(parts) != 8:
        raise ConfigError("box needs cx,cy,cz,cw,hx,hy,hz,hw")
    try:
        vals = [float(v) for v in parts]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"box entries must be reals: {exc}") from exc
    try:
        return BoxSet(TorusPoint.from_angles(*vals[:4], bits=bits),
                      tuple(vals[4:]))
    except ValueError as exc:
        raise ConfigError(f"invalid box: {exc}") from exc


def _positive(name: str, value) -> int:
    try:
        out = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer") from exc
    if out < 1:
        raise ConfigError(f"{name} must be positive, got {out}")
    return out


def _assemble(args) -> tuple[RunConfig, ExperimentOptions]:
    file_cfg = _load_config_file(args.config) if args.config else {}

    def pick(flag, key, default):
        return flag if flag is not None else file_cfg.get(key, default)

    n = pick(args.n, "N", 8.0)
    matrix = pick(args.matrix, "matrix", (2, 1, 1, 1))
    epsilon = pick(args.epsilon, "epsilon", 0.0)
    seed = pick(args.seed, "seed", 0)
    bits = pick(args.bits, "bits", DEFAULT_BITS)
    out = pick(args.out, "out", "")
    samples = pick(args.samples, "samples", None)
    horizon = pick(args.horizon, "horizon", None)
    csv_path = pick(args.csv, "csv", None)
    box_spec = pick(args.box, "box", None)
    tols = _parse_tolerances(args.tol, file_cfg.get("tol"))

    try:
        matrix = tuple(int(v) for v in matrix)
        config = RunConfig(n=float(n), matrix=matrix, epsilon=float(epsilon),
                           seed=int(seed), precision_bits=int(bits),
                           tolerances=tuple(sorted(tols.items())),
                           output_path=str(out))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    _validate_config(config)
    opts = ExperimentOptions(
        samples=None if samples is None else _positive("samples", samples),
        horizon=None if horizon is None else _positive("horizon", horizon),
        box=None if box_spec is None else _parse_box(box_spec,
                                                     config.precision_bits),
        csv_path=None if csv_path is None else str(csv_path))
    return config, opts


def _validate_config(config: RunConfig) -> None:
    if not 32 <= config.precision_bits <= _MAX_BITS:
        raise ConfigError(f"precision_bits must lie in [32, {_MAX_BITS}], "
                          f"got {config.precision_bits}")
    if config.seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {config.seed}")
    if not 0.0 <= config.epsilon <= 0.1:
        raise ConfigError(f"epsilon must lie in [0, 0.1], got {config.epsilon}")
    try:
        _params_for(config, "orbit")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _validate_experiment(name: str, config: RunConfig,
                         opts: ExperimentOptions) -> None:
    """Module preconditions checked before anything runs or is written."""
    if name == "pinch" and config.n > 40.0:
        raise ConfigError("pinch ratios need lam^n above double granularity; "
                          "use N <= 40")
    if name == "lyapunov" and opts.horizon is not None and opts.horizon < 100:
        raise ConfigError("lyapunov horizon must be at least 100")


def _sweep_values(axis: str, text) -> list:
    if text is None:
        raise ConfigError("sweep needs --values")
    if isinstance(text, str):
        parts = [p for p in text.split(",") if p.strip() != ""]
    else:
        parts = list(text)
    try:
        if axis == "seed":
            return [int(p) for p in parts]
        return [float(p) for p in parts]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sweep value for axis {axis}: {exc}") from exc


def _derived_seed(seed: int, index: int) -> int:
    return int(derive_rng(seed, 90001, index).integers(0, 1 << 31))


def _sweep_config(config: RunConfig, axis: str, value, index: int) -> RunConfig:
    if axis == "N":
        return replace(config, n=float(value),
                       seed=_derived_seed(config.seed, index))
    if axis == "epsilon":
        return replace(config, epsilon=float(value),
                       seed=_derived_seed(config.seed, index))
    return replace(config, seed=int(value))


def _stage_of(err: BaseException) -> str:
    stage = getattr(err, "stage", None)
    if stage:
        return str(stage)
    generation = getattr(err, "generation", None)
    if generation is not None:
        return f"good-point generation {generation}"
    return type(err).__name__


# ---------------------------------------------------------------------------
# entry point


def _execute_single(name: str, config: RunConfig, opts: ExperimentOptions,
                    writer: RecordWriter) -> bool:
    record, outcome = run_experiment(name, config, opts)
    writer.record(record)
    writer.rows(name, outcome)
    failed = sorted(k for k, v in record.verdicts.items() if not v)
    if failed:
        print(f"{name}: failed verdicts: {', '.join(failed)}",
              file=sys.stderr)
    return not failed


def _execute_sweep(args, config: RunConfig, opts: ExperimentOptions,
                   writer: RecordWriter) -> bool:
    name = args.experiment
    file_cfg = _load_config_file(args.config) if args.config else {}
    axis = args.axis if args.axis is not None else file_cfg.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}")
    raw = args.values if args.values is not None else file_cfg.get("values")
    values = _sweep_values(axis, raw)
    configs = [_sweep_config(config, axis, v, i)
               for i, v in enumerate(values)]
    for cfg in configs:
        _validate_config(cfg)
        _validate_experiment(name, cfg, opts)
    all_passed = True
    for i, cfg in enumerate(configs):
        record, outcome = run_experiment(name, cfg, opts)
        rid = f"{name}[{i}]"
        record = replace(record, experiment=rid)
        writer.record(record)
        writer.rows(rid, outcome)
        if not record.passed():
            failed = sorted(k for k, v in record.verdicts.items() if not v)
            print(f"{rid}: failed verdicts: {', '.join(failed)}",
                  file=sys.stderr)
            all_passed = False
    return all_passed


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        config, opts = _assemble(args)
        if args.command == "sweep":
            _validate_experiment(args.experiment, config, opts)
        else:
            _validate_experiment(args.command, config, opts)
    except ConfigError as err:
        print(f"skewlab: config error: {err}", file=sys.stderr)
        return 2
    writer = RecordWriter(config.output_path, opts.csv_path)
    try:
        if args.command == "sweep":
            ok = _execute_sweep(args, config, opts, writer)
        else:
            ok = _execute_single(args.command, config, opts, writer)
    except ConfigError as err:
        print(f"skewlab: config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"skewlab: experiment failed at stage {_stage_of(err)}: {err}",
              file=sys.stderr)
        return 1
    finally:
        writer.close()
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
