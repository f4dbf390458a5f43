"""Configuration-driven sweeps, presets and the command-line interface.

A config is an INI file with sections ``experiment``, ``geometry``,
``sweep``, ``time`` and optional ``spectrum``, ``metrology``, ``protocol``.
Every sweep point (geometry x kFa x T x channel) writes its own CSV files;
the manifest JSON is assembled at the end.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .basis import (
    DEFAULT_EPSILON,
    CouplingSpec,
    Geometry,
    GeometryKind,
    load_basis,
    prepare,
    save_basis,
    thermal_states_for,
)
from .errors import BranchMisalignment, ConfigError, ExtendGrid, UnknownPreset
from .levitov import DecoherenceTrace, absorption_spectrum, decoherence_functions, phase_rate
from .metrology import Derivatives, ExactChannel, WeakChannel, metrology_from_derivatives, sld_direction
from .weakcoupling import first_order_shift, fumi_shift

log = logging.getLogger(__name__)

ZERO_TEMPERATURE = 1e-3
OUTPUT_KINDS = ("trace", "spectrum", "metrology", "protocol", "shift")
CHANNELS = ("exact", "weak", "both")
WEAK_LIMIT = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    geometries: tuple[str, ...]
    couplings: tuple[float, ...]
    temperatures: tuple[float, ...]
    t_start: float = 0.0
    t_stop: float = 300.0
    t_step: float = 0.1
    channel: str = "exact"
    outputs: tuple[str, ...] = ("trace",)
    seed: int = 0
    output_dir: str = "results"
    shell_count: int | None = None
    omega0: float | None = None
    epsilon: float = DEFAULT_EPSILON
    eta: float = 0.005
    spectrum_stop: float | None = None
    spectrum_step: float | None = None
    spectrum_min_temperature: float = 0.0
    require_peak: bool = True
    max_stop: float = 1500.0
    shift_time: float = 40.0
    shots: int = 500
    replicas: int = 200
    force: bool = False

    def validate(self) -> "ExperimentConfig":
        if not self.couplings:
            raise ConfigError("[sweep] kFa: list must not be empty")
        if not self.temperatures:
            raise ConfigError("[sweep] temperature_over_TF: list must not be empty")
        if not self.geometries:
            raise ConfigError("[geometry] kind: list must not be empty")
        if self.t_step <= 0:
            raise ConfigError("[time] step_over_tauF: must be positive")
        if self.t_stop <= self.t_start or self.t_start < 0:
            raise ConfigError("[time] stop_over_tauF must exceed start_over_tauF >= 0")
        if self.channel not in CHANNELS:
            raise ConfigError(f"[experiment] channel: {self.channel!r} not in {CHANNELS}")
        for out in self.outputs:
            if out not in OUTPUT_KINDS:
                raise ConfigError(f"[experiment] outputs: unknown product {out!r}")
        for k in self.couplings:
            if k >= 0:
                raise ConfigError(f"[sweep] kFa: {k} must be negative")
        for T in self.temperatures:
            if T <= 0:
                raise ConfigError(f"[sweep] temperature_over_TF: {T} must be positive after T = 0 mapping")
        for g in self.geometries:
            try:
                GeometryKind(g)
            except ValueError as exc:
                raise ConfigError(f"[geometry] kind: unknown geometry {g!r}") from exc
        if self.channel == "weak" and not self.force:
            bad = [k for k in self.couplings if abs(k) > WEAK_LIMIT]
            if bad:
                raise ConfigError(f"[sweep] kFa: weak channel rejects |kFa| > {WEAK_LIMIT} ({bad}); pass --force")
        if self.channel in ("weak", "both") and any(g != GeometryKind.BOX3D_SWAVE.value for g in self.geometries):
            raise ConfigError("[geometry] kind: the weak channel describes the 3D s-wave gas only")
        return self

    @property
    def time_grid(self) -> np.ndarray:
        n = int(math.floor((self.t_stop + 1e-9 * self.t_step) / self.t_step))
        return self.t_step * np.arange(n + 1)

    def channels(self) -> tuple[str, ...]:
        return ("exact", "weak") if self.channel == "both" else (self.channel,)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# config parsing


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.replace(";", ",").split(",") if v.strip()]


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=")[0].strip().lower() == key.lower():
            return i
    return None


def parse_config(text: str, source: str = "<config>", force: bool = False) -> ExperimentConfig:
    """Parse INI text into a validated :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    def get(section, key, conv, default=None, required=False):
        if not cp.has_option(section, key):
            if required:
                raise ConfigError(f"{source}: missing [{section}] {key}")
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            line = _line_of(text, section, key)
            where = f" line {line}" if line else ""
            raise ConfigError(f"{source}{where}: [{section}] {key} = {raw!r}: {exc}") from exc

    floats = lambda s: tuple(float(x) for x in _split(s))  # noqa: E731
    strings = lambda s: tuple(_split(s))  # noqa: E731

    def boolean(s):
        v = s.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    temps = get("sweep", "temperature_over_TF", floats, required=True)
    mapped = []
    for T in temps:
        if T == 0:
            warnings.warn(f"T = 0 mapped to T = {ZERO_TEMPERATURE} T_F", stacklevel=2)
            mapped.append(ZERO_TEMPERATURE)
        else:
            mapped.append(T)
    cfg = ExperimentConfig(
        name=get("experiment", "name", str, "experiment"),
        geometries=get("geometry", "kind", strings, (GeometryKind.BOX3D_SWAVE.value,)),
        couplings=get("sweep", "kFa", floats, required=True),
        temperatures=tuple(mapped),
        t_start=get("time", "start_over_tauF", float, 0.0),
        t_stop=get("time", "stop_over_tauF", float, 300.0),
        t_step=get("time", "step_over_tauF", float, 0.1),
        channel=get("experiment", "channel", str, "exact").strip(),
        outputs=get("experiment", "outputs", strings, ("trace",)),
        seed=get("experiment", "seed", int, 0),
        output_dir=get("experiment", "output_dir", str, "results"),
        shell_count=get("geometry", "shell_count", int, None),
        omega0=get("geometry", "omega0_over_EF", float, None),
        epsilon=get("geometry", "epsilon", float, DEFAULT_EPSILON),
        eta=get("spectrum", "eta_over_EF", float, 0.005),
        spectrum_stop=get("spectrum", "stop_over_tauF", float, None),
        spectrum_step=get("spectrum", "step_over_tauF", float, None),
        spectrum_min_temperature=get("spectrum", "min_temperature_over_TF", float, 0.0),
        require_peak=get("metrology", "require_peak", boolean, True),
        max_stop=get("metrology", "max_stop_over_tauF", float, 1500.0),
        shift_time=get("metrology", "shift_time_over_tauF", float, 40.0),
        shots=get("protocol", "shots", int, 500),
        replicas=get("protocol", "replicas", int, 200),
        force=force,
    )
    if not cfg.temperatures:
        line = _line_of(text, "sweep", "temperature_over_TF")
        raise ConfigError(f"{source} line {line}: [sweep] temperature_over_TF: list must not be empty")
    if not cfg.couplings:
        line = _line_of(text, "sweep", "kFa")
        raise ConfigError(f"{source} line {line}: [sweep] kFa: list must not be empty")
    return cfg.validate()


def load_config(path: str | Path, force: bool = False) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path), force)


# ---------------------------------------------------------------------------
# presets


def _log_grid(lo, hi, n):
    return tuple(float(f"{x:.6g}") for x in np.geomspace(lo, hi, n))


def _base(name, **kw) -> ExperimentConfig:
    defaults = dict(name=name, geometries=(GeometryKind.BOX3D_SWAVE.value,), output_dir=f"results/{name}")
    defaults.update(kw)
    return ExperimentConfig(**defaults)


_PRESETS = {
    "fig2": lambda: _base(
        "fig2", couplings=(-0.5, -1.5, -6.0), temperatures=(ZERO_TEMPERATURE, 0.01, 0.1),
        t_stop=300.0, t_step=0.1, outputs=("trace", "spectrum"), eta=0.02,
        spectrum_stop=800.0, spectrum_step=0.25, spectrum_min_temperature=0.005,
    ),
    "fig3": lambda: _base(
        "fig3", couplings=(-0.5,), temperatures=_log_grid(0.02, 1.0, 15), t_stop=300.0, t_step=0.5,
        outputs=("metrology",), require_peak=False,
    ),
    "fig4a": lambda: _base(
        "fig4a", couplings=(-0.5, -1.5, -6.0), temperatures=(0.2,), t_stop=300.0, t_step=0.25, outputs=("metrology",),
    ),
    "fig4b": lambda: _base(
        "fig4b", couplings=(-0.5, -1.5), temperatures=(0.2, 0.22), t_stop=100.0, t_step=0.1, outputs=("trace",),
    ),
    "fig4c": lambda: _base(
        "fig4c", couplings=(-0.5, -1.5, -6.0), temperatures=_log_grid(0.05, 0.5, 8), t_stop=300.0, t_step=0.5,
        outputs=("metrology",),
    ),
    "fig4d": lambda: _base(
        "fig4d", couplings=tuple(-x for x in _log_grid(0.05, 6.0, 12)), temperatures=(0.1,), t_stop=300.0,
        t_step=0.5, outputs=("metrology",), channel="both",
    ),
    "figS1": lambda: _base(
        "figS1", couplings=(-0.5, -0.2, -0.1), temperatures=(0.2,), t_stop=200.0, t_step=0.1,
        outputs=("trace",), channel="both",
    ),
    "figS2": lambda: _base(
        "figS2", couplings=(-0.5, -1.5, -6.0), temperatures=_log_grid(0.01, 0.5, 10), t_stop=60.0, t_step=0.05,
        outputs=("trace", "shift"),
    ),
    "figS3": lambda: _base(
        "figS3", geometries=(GeometryKind.BOX1D_EVEN.value, GeometryKind.HARMONIC1D_EVEN.value),
        couplings=(-1.0, -0.01), temperatures=(0.01, 0.1), t_stop=1250.0, t_step=0.5, outputs=("trace",),
        omega0=2.5e-3, shell_count=201,
    ),
    "figS4": lambda: _base(
        "figS4", geometries=(GeometryKind.BOX1D_EVEN.value, GeometryKind.HARMONIC1D_EVEN.value),
        couplings=(-1.0, -0.01), temperatures=(0.1,), t_stop=1250.0, t_step=0.5, outputs=("metrology",),
        omega0=2.5e-3, shell_count=201, require_peak=False,
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ExperimentConfig:
    """Fully specified config regenerating the data behind one figure."""
    try:
        return _PRESETS[name]().validate()
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None


# ---------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class SweepPoint:
    geometry: str
    kFa: float
    temperature: float
    channel: str

    @property
    def tag(self) -> str:
        return f"{self.channel}_{self.geometry}_kFa{self.kFa:+.4g}_T{self.temperature:.4g}"


def sweep_points(cfg: ExperimentConfig) -> list[SweepPoint]:
    pts = []
    for g in cfg.geometries:
        for k in cfg.couplings:
            for T in cfg.temperatures:
                for ch in cfg.channels():
                    pts.append(SweepPoint(g, k, T, ch))
    return pts


def _content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _geometry(cfg: ExperimentConfig, kind: str, t_end: float) -> Geometry:
    kind = GeometryKind(kind)
    if kind is GeometryKind.HARMONIC1D_EVEN:
        if cfg.omega0 is not None:
            return Geometry.harmonic1d_from_omega(cfg.omega0)
        return Geometry.harmonic1d(cfg.shell_count or 201)
    if kind is GeometryKind.BOX1D_EVEN:
        # revival of the 1D box is pi (2 N_e - 1) / 2; keep it past the window
        need = int(math.ceil((2 * t_end / math.pi + 1) / 2 * 1.2))
        return Geometry.box1d(max(cfg.shell_count or 200, need))
    need = int(math.ceil(2 * t_end / math.pi))
    return Geometry.box3d(max(cfg.shell_count or 200, need))


class BasisCache:
    """Disk cache of truncated bases keyed by a content hash."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def get(self, geometry: Geometry, kFa: float, temperatures, epsilon: float):
        key = _content_hash({"g": geometry.to_dict(), "kFa": kFa, "T": list(temperatures), "eps": epsilon})
        path = self.root / f"basis_{key}.json"
        if path.exists():
            basis = load_basis(path)
            return basis, thermal_states_for(basis, temperatures)
        basis, thermals = prepare(geometry, CouplingSpec(kFa), list(temperatures), epsilon)
        save_basis(basis, path)
        return basis, thermals


def _trace_cache(cfg_dir: Path, key_obj) -> Path:
    return cfg_dir / f"trace_{_content_hash(key_obj)}.npz"


def _cached_traces(cache_dir: Path, cfg: ExperimentConfig, point: SweepPoint, temps, grid) -> list[DecoherenceTrace]:
    key = {
        "point": asdict(point), "T": list(temps), "grid": [float(grid[0]), float(grid[-1]), len(grid)],
        "eps": cfg.epsilon, "shells": cfg.shell_count, "omega0": cfg.omega0, "version": __version__,
    }
    path = _trace_cache(cache_dir, key)
    if path.exists():
        data = np.load(path, allow_pickle=False)
        regimes = json.loads(str(data["regimes"]))
        return [
            DecoherenceTrace(data["times"], data["values"][i], data["phase"][i], data["logm"][i], regimes[i])
            for i in range(len(temps))
        ]
    if point.channel == "weak":
        traces = WeakChannel(point.kFa).traces(temps, grid)
    else:
        geometry = _geometry(cfg, point.geometry, float(grid[-1]))
        basis, thermals = BasisCache(cache_dir).get(geometry, point.kFa, temps, cfg.epsilon)
        traces = decoherence_functions(basis, thermals, grid)
    np.savez(
        path,
        times=grid,
        values=np.array([tr.values for tr in traces]),
        phase=np.array([tr.phase for tr in traces]),
        logm=np.array([tr.log_magnitude for tr in traces]),
        regimes=json.dumps([tr.regime for tr in traces], default=str),
    )
    return traces


def _crop(trace: DecoherenceTrace, t_start: float) -> DecoherenceTrace:
    if t_start <= 0:
        return trace
    m = trace.times >= t_start
    return DecoherenceTrace(trace.times[m], trace.values[m], trace.phase[m], trace.log_magnitude[m], trace.regime)


def _metrology(cfg, point, cache_dir):
    T = point.temperature
    grid = cfg.time_grid
    while True:
        temps = [T * 0.99, T, T * 1.01]
        lo, mid, hi = _cached_traces(cache_dir, cfg, point, temps, grid)
        gap = np.abs(hi.phase - lo.phase)
        der = Derivatives(mid, (hi.magnitude - lo.magnitude) / (0.02 * T), (hi.phase - lo.phase) / (0.02 * T), 1e-2)
        if gap.max() > math.pi / 2:
            raise BranchMisalignment("phase branches at T(1 +- dT) misaligned; refine the grid")
        try:
            return metrology_from_derivatives(der, T, point.kFa, point.channel, "F_Q", cfg.require_peak), der
        except ExtendGrid:
            if grid[-1] * 2 > cfg.max_stop:
                raise
            grid = cfg.t_step * np.arange(int(round(2 * grid[-1] / cfg.t_step)) + 1)


def run_point(cfg: ExperimentConfig, point: SweepPoint) -> dict:
    """Compute every requested product for one sweep point; never raises."""
    out_dir = Path(cfg.output_dir)
    cache_dir = out_dir / "cache"
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir.mkdir(parents=True, exist_ok=True)
    entry = {"point": asdict(point), "files": [], "status": "ok", "errors": {}}
    start = time.perf_counter()
    if point.channel == "weak" and abs(point.kFa) > WEAK_LIMIT and not cfg.force:
        entry["status"] = "skipped"
        entry["errors"]["all"] = f"weak channel not evaluated for |kFa| > {WEAK_LIMIT}"
        entry["wall_time_s"] = 0.0
        return entry
    trace = None
    for product in cfg.outputs:
        try:
            if product == "trace":
                (trace,) = _cached_traces(cache_dir, cfg, point, [point.temperature], cfg.time_grid)
                f = out_dir / f"trace_{point.tag}.csv"
                _crop(trace, cfg.t_start).to_csv(f)
                entry["files"].append(f.name)
            elif product == "spectrum":
                if point.temperature < cfg.spectrum_min_temperature:
                    continue
                step = cfg.spectrum_step or cfg.t_step
                stop = cfg.spectrum_stop or cfg.t_stop
                grid = step * np.arange(int(round(stop / step)) + 1)
                (long_trace,) = _cached_traces(cache_dir, cfg, point, [point.temperature], grid)
                spec = absorption_spectrum(long_trace, cfg.eta)
                f = out_dir / f"spectrum_{point.tag}.csv"
                spec.to_csv(f)
                entry["files"].append(f.name)
                entry["spectrum_peak"] = spec.peak()
                entry["spectrum_width"] = spec.width()
            elif product in ("metrology", "protocol"):
                if product == "metrology" or "t_max" not in entry:
                    res, _ = _metrology(cfg, point, cache_dir)
                    f = out_dir / f"metrology_{point.tag}.csv"
                    res.to_csv(f)
                    j = out_dir / f"metrology_{point.tag}.json"
                    res.summary_json(j)
                    entry["files"] += [f.name, j.name]
                    summary = res.summary()
                    if summary["t_max"] is not None:
                        entry["t_max"], entry["Q_max"] = summary["t_max"], summary["Q_max"]
                if product == "protocol":
                    if "t_max" not in entry:
                        raise ExtendGrid("no QSNR optimum inside the grid for the protocol benchmark")
                    entry["files"].append(_protocol(cfg, point, entry["t_max"], entry["Q_max"], out_dir).name)
            elif product == "shift":
                entry["files"].append(_shift(cfg, point, out_dir, cache_dir).name)
        except Exception as exc:  # record and continue with the other products
            entry["status"] = "failed"
            entry["errors"][product] = f"{type(exc).__name__}: {exc}"
    entry["wall_time_s"] = round(time.perf_counter() - start, 3)
    log.info("%s: %s in %.1f s", point.tag, entry["status"], entry["wall_time_s"])
    return entry


def _protocol(cfg, point, t_max, q_max, out_dir) -> Path:
    from .protocol import build_point_model, estimator_benchmark, write_benchmark_csv

    T = point.temperature
    channel = WeakChannel(point.kFa) if point.channel == "weak" else ExactChannel(point.kFa, epsilon=cfg.epsilon)
    model = build_point_model(channel, t_max, 0.5 * T, 1.5 * T)
    vals = channel.values_at([T * 0.99, T, T * 1.01], t_max)
    dv = (vals[2] - vals[0]) / (0.02 * T)
    theta_star = sld_direction(vals[1], dv)
    f_q = (q_max / T) ** 2
    thetas = theta_star + np.linspace(0, np.pi, 4, endpoint=False)
    rows = estimator_benchmark(thetas, cfg.shots, T, model, vals[1], dv, f_q, cfg.replicas, cfg.seed)
    return write_benchmark_csv(rows, out_dir / f"protocol_{point.tag}.csv")


def _shift(cfg, point, out_dir, cache_dir) -> Path:
    """Phase slope ``w = dphi/dt`` at the configured time plus its references."""
    grid = cfg.time_grid
    (trace,) = _cached_traces(cache_dir, cfg, point, [point.temperature], grid)
    t = cfg.shift_time
    rec = {
        "T": point.temperature, "kFa": point.kFa, "t": t,
        "w_numeric": phase_rate(trace, t), "w_instantaneous": phase_rate(trace, t, window=0.0),
        "w_first_order": first_order_shift(point.temperature, None, point.kFa), "w_fumi": fumi_shift(point.kFa),
        "channel": point.channel,
    }
    path = out_dir / f"shift_{point.tag}.json"
    path.write_text(json.dumps(rec, indent=2))
    return path


def _assemble(cfg: ExperimentConfig, entries: list[dict], out_dir: Path) -> list[str]:
    """Combined tables built from per-point files after the sweep."""
    extra = []
    if "metrology" in cfg.outputs:
        rows = [e for e in entries if "Q_max" in e]
        if rows:
            f = out_dir / "optimum_summary.csv"
            with f.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["geometry", "channel", "kFa", "T", "t_max", "Q_max"])
                for e in rows:
                    p = e["point"]
                    w.writerow([p["geometry"], p["channel"], p["kFa"], p["temperature"], f"{e['t_max']:.12g}", f"{e['Q_max']:.12g}"])
            extra.append(f.name)
        if len(cfg.temperatures) > 1:
            f = out_dir / "qsnr_surface.csv"
            with f.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["geometry", "channel", "kFa", "T", "t_over_tauF", "QSNR"])
                for e in entries:
                    p = e["point"]
                    name = next((x for x in e["files"] if x.startswith("metrology_") and x.endswith(".csv")), None)
                    if name is None:
                        continue
                    data = np.loadtxt(out_dir / name, delimiter=",", skiprows=1, ndmin=2)
                    for t, q in zip(data[:, 0], data[:, 6]):
                        w.writerow([p["geometry"], p["channel"], p["kFa"], p["temperature"], f"{t:.12g}", f"{q:.12g}"])
            extra.append(f.name)
    if cfg.channel == "both" and "trace" in cfg.outputs:
        for g in cfg.geometries:
            for k in cfg.couplings:
                for T in cfg.temperatures:
                    pe, pw = SweepPoint(g, k, T, "exact"), SweepPoint(g, k, T, "weak")
                    fe, fw = out_dir / f"trace_{pe.tag}.csv", out_dir / f"trace_{pw.tag}.csv"
                    if not (fe.exists() and fw.exists()):
                        continue
                    de = np.loadtxt(fe, delimiter=",", skiprows=1, ndmin=2)
                    dw = np.loadtxt(fw, delimiter=",", skiprows=1, ndmin=2)
                    f = out_dir / f"compare_{g}_kFa{k:+.4g}_T{T:.4g}.csv"
                    with f.open("w", newline="") as fh:
                        w = csv.writer(fh)
                        w.writerow(["t_over_tauF", "re_v_exact", "re_v_weak"])
                        for a, b in zip(de, dw):
                            w.writerow([f"{a[0]:.12g}", f"{a[1]:.12g}", f"{b[1]:.12g}"])
                    extra.append(f.name)
    return extra


def run(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Execute the sweep and write ``manifest.json``; returns the manifest."""
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = sweep_points(cfg)
    start = time.perf_counter()
    if workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run_point, [cfg] * len(points), points))
    else:
        entries = [run_point(cfg, p) for p in points]
    extra = _assemble(cfg, entries, out_dir)
    manifest = {
        "name": cfg.name,
        "code_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": _content_hash(cfg.to_dict()),
        "points": entries,
        "combined_files": extra,
        "status": "ok" if all(e["status"] != "failed" for e in entries) else "partial",
        "wall_time_s": round(time.perf_counter() - start, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


# ---------------------------------------------------------------------------
# oracle suite


def oracle_check(n_bases: int = 25, n_points: int = 10, seed: int = 0, max_modes: int = 6) -> float:
    """Worst determinant-vs-Fock-trace discrepancy over random small bases."""
    from .basis import BasisSet, ThermalState, fermi_function
    from .levitov import decoherence_at, many_body_oracle

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_bases):
        m = int(rng.integers(1, max_modes + 1))
        h0 = np.diag(np.sort(rng.uniform(0.0, 2.0, m)))
        x = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
        h1 = h0 + 0.3 * (x + x.conj().T) / 2
        basis = BasisSet.from_hamiltonians(h0, h1)
        for _ in range(n_points):
            T = float(rng.uniform(0.05, 2.0))
            mu = float(rng.uniform(0.0, 2.0))
            t = float(rng.uniform(0.0, 20.0))
            occ = fermi_function(basis.unperturbed_energies, mu, T)
            th = ThermalState(T, mu, occ, 0)
            det = decoherence_at(basis, [th], t)[0]
            ref = many_body_oracle(basis, th, t)
            worst = max(worst, abs(det - ref))
    return worst


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fermi-thermometry", description="Impurity-qubit thermometry of Fermi gases")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep points")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--force", action="store_true", help="allow the weak channel beyond |kFa| = 0.5")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a config file")
    r.add_argument("config")
    pr = sub.add_parser("preset", help="run a named figure preset")
    pr.add_argument("name", choices=PRESET_NAMES)
    pr.add_argument("--out", default=None, help="output directory")
    v = sub.add_parser("validate", help="parse and validate a config file")
    v.add_argument("config")
    sub.add_parser("oracle-check", help="compare the determinant with the Fock-space trace")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "oracle-check":
            worst = oracle_check()
            print(f"oracle max |det - trace| = {worst:.3e}")
            return 0 if worst < 1e-10 else 3
        if args.command == "preset":
            cfg = preset(args.name)
            if args.out:
                cfg = replace(cfg, output_dir=args.out)
        else:
            cfg = load_config(args.config, force=args.force)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.force:
            cfg = replace(cfg, force=True)
        if args.command == "validate":
            print(f"{cfg.name}: {len(sweep_points(cfg))} sweep points, outputs {', '.join(cfg.outputs)}")
            return 0
        manifest = run(cfg, workers=args.workers)
    except (ConfigError, UnknownPreset) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print(f"{manifest['name']}: {manifest['status']} -> {Path(cfg.output_dir) / 'manifest.json'}")
    return 0 if manifest["status"] == "ok" else 2


if __name__ == "__main__":
    sys.exit(main())
