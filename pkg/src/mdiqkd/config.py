"""INI experiment configuration.

Losses are given in dB and turned into transmittances once, at load time.
Every error names the section, key and (when found) the file line.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .channel import ChannelSpec
from .optimizer import FITNESS_MODES, GaConfig, SearchBounds
from .params import DeviceParams, ParameterError, ProtocolParams, db_to_transmittance
from .finite_key import CONVENTIONS, FORMS

BUNDLED = {"30db": "mdi_30db.ini", "33db": "mdi_33db.ini"}
PARTY_KEYS = ("s", "mu", "nu", "p_s", "p_mu", "p_nu")


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


@dataclass(frozen=True)
class SweepSettings:
    loss_min_db: float = 28.0
    loss_max_db: float = 35.0
    points: int = 15
    intensities: str = "fixed"  # "table1" (nearest reference row) or "optimize"


@dataclass(frozen=True)
class ProbeSettings:
    frames_dir: str | None = None
    calibration: str | None = None
    references: str | None = None
    method: str = "sum"
    degree: int = 3
    snr: float = 20.0
    n_samples: int = 80
    dt: float = 0.2e-9
    fwhm: float = 3e-9
    reference_levels: int = 20
    frames_per_level: int = 20
    test_frames_per_level: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    loss_a_db: float
    loss_b_db: float
    spec_a: ChannelSpec
    spec_b: ChannelSpec
    dev: DeviceParams
    alice: ProtocolParams | None
    bob: ProtocolParams | None
    omega: float = 0.0
    n_bins: int = 100
    eta_th_a: float = 0.0
    eta_th_b: float = 0.0
    form: str = "standard"
    convention: str = "alice"
    ga: GaConfig = field(default_factory=GaConfig)
    bounds: SearchBounds = field(default_factory=SearchBounds)
    fitness_mode: str = "static-mean"
    sweep: SweepSettings = field(default_factory=SweepSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    seed: int = 0
    require_positive: bool = False
    source: str = ""

    @property
    def needs_optimization(self) -> bool:
        return self.alice is None or self.bob is None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, ga=replace(self.ga, seed=seed))

    def with_params(self, alice, bob) -> "ExperimentConfig":
        return replace(self, alice=alice, bob=bob)


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif current == section and key is not None:
            name = line.split("=", 1)[0].split(":", 1)[0].strip().lower()
            if name == key:
                return n
    return None


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, text: str, source: str):
        self.p = parser
        self.text = text
        self.source = source

    def error(self, section, key, msg) -> ConfigError:
        line = _line_of(self.text, section, key)
        where = f"{self.source}:{line}: " if line else f"{self.source}: "
        name = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{where}{name}: {msg}")

    def has(self, section, key=None):
        if key is None:
            return self.p.has_section(section)
        return self.p.has_option(section, key)

    def get(self, section, key, conv=float, default=...):
        if not self.p.has_option(section, key):
            if default is ...:
                raise self.error(section, None if not self.p.has_section(section) else key,
                                 f"missing required field '{key}'")
            return default
        raw = self.p.get(section, key)
        try:
            if conv is bool:
                return self.p.getboolean(section, key)
            return conv(raw)
        except ValueError as exc:
            raise self.error(section, key, f"cannot parse {raw!r}: {exc}") from None


def _party(r: _Reader, section: str, omega: float):
    if not r.has(section):
        raise r.error(section, None, "missing section")
    if r.get(section, "mode", str, "fixed").strip().lower() == "optimize":
        return None
    vals = {k: r.get(section, k) for k in PARTY_KEYS}
    try:
        return ProtocolParams(omega=omega, **vals)
    except ParameterError as exc:
        raise r.error(section, None, str(exc)) from None


def resolve_path(path) -> Path:
    """Config path, or the bundled config of that name ("30db", "33db")."""
    p = Path(path)
    if p.exists():
        return p
    name = str(path).lower()
    if name in BUNDLED:
        return Path(str(resources.files("mdiqkd") / "configs" / BUNDLED[name]))
    raise ConfigError(f"config file {path} not found")


def load_config(path) -> ExperimentConfig:
    path = resolve_path(path)
    text = path.read_text()
    return parse_config(text, str(path), base_dir=path.parent)


def parse_config(text: str, source: str = "<config>", base_dir=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    r = _Reader(parser, text, source)

    loss_a = r.get("channel", "alice_loss_db")
    loss_b = r.get("channel", "bob_loss_db")
    for key, v in (("alice_loss_db", loss_a), ("bob_loss_db", loss_b)):
        if v < 0:
            raise r.error("channel", key, "loss must be >= 0 dB")
    s2a = r.get("channel", "alice_sigma2", float, 0.0)
    s2b = r.get("channel", "bob_sigma2", float, 0.0)
    try:
        spec_a = ChannelSpec(db_to_transmittance(loss_a), s2a)
        spec_b = ChannelSpec(db_to_transmittance(loss_b), s2b)
    except ValueError as exc:
        raise r.error("channel", None, str(exc)) from None
    n_bins = r.get("channel", "n_bins", int, 100)

    dev_kw = {}
    for f in fields(DeviceParams):
        if f.name != "metadata" and r.has("device", f.name):
            dev_kw[f.name] = r.get("device", f.name)
    try:
        dev = DeviceParams(**dev_kw)
    except ParameterError as exc:
        raise r.error("device", None, str(exc)) from None

    omega = r.get("protocol", "omega", float, 0.0)
    form = r.get("protocol", "form", str, "standard")
    convention = r.get("protocol", "convention", str, "alice")
    if form not in FORMS:
        raise r.error("protocol", "form", f"must be one of {FORMS}")
    if convention not in CONVENTIONS:
        raise r.error("protocol", "convention", f"must be one of {CONVENTIONS}")
    alice = _party(r, "alice", omega)
    bob = _party(r, "bob", omega)

    th_a = r.get("postselection", "eta_th_a", float, 0.0)
    th_b = r.get("postselection", "eta_th_b", float, 0.0)
    for key, v in (("eta_th_a", th_a), ("eta_th_b", th_b)):
        if not 0 <= v <= 1:
            raise r.error("postselection", key, "cutoff must lie in [0, 1]")

    seed = r.get("run", "seed", int, 0)
    ga_kw = {f.name: r.get("optimizer", f.name, type(f.default), f.default)
             for f in fields(GaConfig) if f.name != "seed"}
    try:
        ga = GaConfig(seed=seed, **ga_kw)
        bounds = SearchBounds(
            (r.get("optimizer", "intensity_min", float, 1e-4),
             r.get("optimizer", "intensity_max", float, 1.0)),
            (r.get("optimizer", "probability_min", float, 1e-3),
             r.get("optimizer", "probability_max", float, 0.997)),
        )
    except Exception as exc:
        raise r.error("optimizer", None, str(exc)) from None
    mode = r.get("optimizer", "fitness_mode", str, "static-mean")
    if mode not in FITNESS_MODES:
        raise r.error("optimizer", "fitness_mode", f"must be one of {FITNESS_MODES}")

    sweep = SweepSettings(
        r.get("sweep", "loss_min_db", float, 28.0),
        r.get("sweep", "loss_max_db", float, 35.0),
        r.get("sweep", "points", int, 15),
        r.get("sweep", "intensities", str, "fixed"),
    )
    if sweep.intensities not in ("fixed", "table1", "optimize"):
        raise r.error("sweep", "intensities", "must be 'fixed', 'table1' or 'optimize'")
    if sweep.points < 1 or sweep.loss_max_db < sweep.loss_min_db:
        raise r.error("sweep", None, "empty loss range")
    if sweep.loss_min_db < loss_a:
        raise r.error("sweep", "loss_min_db", "total loss below Alice's loss")

    def rel(v):
        if v is None or base_dir is None or Path(v).is_absolute():
            return v
        return str(Path(base_dir) / v)

    probe = ProbeSettings(
        rel(r.get("probe", "frames_dir", str, None)),
        rel(r.get("probe", "calibration", str, None)),
        rel(r.get("probe", "references", str, None)),
        r.get("probe", "method", str, "sum"),
        r.get("probe", "degree", int, 3),
        r.get("probe", "snr", float, 20.0),
        r.get("probe", "n_samples", int, 80),
        r.get("probe", "dt", float, 0.2e-9),
        r.get("probe", "fwhm", float, 3e-9),
        r.get("probe", "reference_levels", int, 20),
        r.get("probe", "frames_per_level", int, 20),
        r.get("probe", "test_frames_per_level", int, 50),
    )
    if probe.method not in ("sum", "gaussian"):
        raise r.error("probe", "method", "must be 'sum' or 'gaussian'")

    return ExperimentConfig(
        loss_a_db=loss_a, loss_b_db=loss_b, spec_a=spec_a, spec_b=spec_b, dev=dev,
        alice=alice, bob=bob, omega=omega, n_bins=n_bins, eta_th_a=th_a, eta_th_b=th_b,
        form=form, convention=convention, ga=ga, bounds=bounds, fitness_mode=mode,
        sweep=sweep, probe=probe, seed=seed,
        require_positive=r.get("run", "require_positive", bool, False), source=source,
    )


def party_section(p: ProtocolParams) -> dict:
    return {k: repr(getattr(p, k)) for k in PARTY_KEYS}


def resolved_ini(cfg: ExperimentConfig) -> str:
    """Fully resolved configuration, including the derived transmittances."""
    cp = configparser.ConfigParser()
    cp["channel"] = {
        "alice_loss_db": repr(cfg.loss_a_db), "bob_loss_db": repr(cfg.loss_b_db),
        "alice_sigma2": repr(cfg.spec_a.sigma2), "bob_sigma2": repr(cfg.spec_b.sigma2),
        "n_bins": str(cfg.n_bins),
        "alice_eta0": repr(cfg.spec_a.eta0), "bob_eta0": repr(cfg.spec_b.eta0),
    }
    cp["device"] = {k: repr(v) for k, v in cfg.dev.to_dict().items()}
    cp["protocol"] = {"omega": repr(cfg.omega), "form": cfg.form,
                      "convention": cfg.convention}
    for name, p in (("alice", cfg.alice), ("bob", cfg.bob)):
        cp[name] = party_section(p) if p is not None else {"mode": "optimize"}
    cp["postselection"] = {"eta_th_a": repr(cfg.eta_th_a), "eta_th_b": repr(cfg.eta_th_b)}
    cp["optimizer"] = {f.name: repr(getattr(cfg.ga, f.name)) for f in fields(GaConfig)
                       if f.name != "seed"}
    cp["optimizer"].update({
        "fitness_mode": cfg.fitness_mode,
        "intensity_min": repr(cfg.bounds.intensity[0]),
        "intensity_max": repr(cfg.bounds.intensity[1]),
        "probability_min": repr(cfg.bounds.probability[0]),
        "probability_max": repr(cfg.bounds.probability[1]),
    })
    cp["sweep"] = {f.name: str(getattr(cfg.sweep, f.name)) for f in fields(SweepSettings)}
    cp["probe"] = {f.name: str(getattr(cfg.probe, f.name)) for f in fields(ProbeSettings)
                   if getattr(cfg.probe, f.name) is not None}
    cp["run"] = {"seed": str(cfg.seed), "require_positive": str(cfg.require_positive)}
    import io
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
