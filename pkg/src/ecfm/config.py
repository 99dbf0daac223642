"""Strict TOML/JSON experiment configuration.

Unknown keys and ill-typed values are rejected with a message anchored
to the offending line of the source file.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VERSION = "ecfm-config-v1"


class ConfigError(ValueError):
    """Malformed configuration; ``str`` carries ``path:line: message``."""


@dataclass
class ProblemConfig:
    shift: float = 2.0
    std: float = 1.0
    horizon: float = 1.0
    n_times: int = 11
    n_centers: int = 9
    bandwidth: float = 1.5
    modes: list = field(default_factory=list)


@dataclass
class TrainConfig:
    budget: float = math.inf
    robust: bool = False
    rho: float = 10.0
    alpha0: float = 1.0
    zeta0: float = 0.0
    lambda_min: float = 0.0
    lambda_max: float = math.inf
    max_outer: int = 60
    batch: int = 1000
    eval_batch: int = 4000
    confidence: float = 0.05
    substeps: int = 8
    divergence: str = "exact"
    n_probes: int = 16


@dataclass
class CollapseConfig:
    n_members: int = 4
    eps0: float = 0.04
    tau0: float = 0.1
    a: float = 4.0
    sigma: float = 1.0
    n: int = 20_000
    k: int = 5
    profile: str = "geometric"


@dataclass
class GeodesicConfig:
    lo: float = -6.0
    hi: float = 6.0
    cells: int = 512
    eps: float = 0.1
    horizon: float = 1.0
    tol: float = 1e-10
    max_iter: int = 5000
    mean0: float = -1.0
    var0: float = 0.25
    mean1: float = 1.0
    var1: float = 0.25
    times: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass
class GammaConfig:
    lambdas: list = field(default_factory=lambda: [2.0, 1.0, 0.5, 0.25])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_batch: int = 4000
    workers: int = 1


@dataclass
class CertifyConfig:
    field: str = ""
    lambda_star: float | None = None
    delta_safe: float = 0.1
    alpha: float = 0.05
    delta_tot_max: float | None = None


@dataclass
class StabilityConfig:
    axis: str = "field-noise"
    magnitudes: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n: int = 2000
    noise_seed: int = 0
    field: str = ""


SECTIONS = {"problem": ProblemConfig, "train": TrainConfig, "collapse": CollapseConfig,
            "geodesic": GeodesicConfig, "gamma": GammaConfig, "certify": CertifyConfig,
            "stability": StabilityConfig}
TOP_KEYS = {"version", "seed", "outdir", *SECTIONS}
MODE_KEYS = {"kind", "params", "label", "floor", "target"}


@dataclass
class ExperimentConfig:
    version: str = VERSION
    seed: int = 0
    outdir: str = "runs"
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    collapse: CollapseConfig = field(default_factory=CollapseConfig)
    geodesic: GeodesicConfig = field(default_factory=GeodesicConfig)
    gamma: GammaConfig = field(default_factory=GammaConfig)
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    source: str = ""

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return _encode(d)

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return self.digest()[:12]

    def resolve(self, path: str) -> Path:
        """Paths inside a config are relative to the config file."""
        p = Path(path)
        if p.is_absolute() or not self.source:
            return p
        return Path(self.source).parent / p


def _encode(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_encode(v) for v in obj]
    return obj


def _line_of(text: str, section: str | None, key: str) -> int:
    """Best-effort line number of ``key``, top level or inside ``section``."""
    lines = text.splitlines()
    is_json = text.lstrip().startswith("{")
    start = 0
    if section is not None:
        head = (r'"%s"\s*:' if is_json else r"^\s*\[\s*%s\s*\]") % re.escape(section)
        start = next((i for i, ln in enumerate(lines) if re.search(head, ln)), 0)
    pat = (r'"%s"\s*:' if is_json else r'^\s*"?%s"?\s*=') % re.escape(key)
    current = section if is_json else None
    for i in range(start, len(lines)):
        if not is_json:
            h = re.match(r"^\s*\[+\s*([\w.-]+)", lines[i])
            if h:
                current = h.group(1)
                continue
        if current == section and re.search(pat, lines[i]):
            return i + 1
    return start + 1


class _Loader:
    def __init__(self, path: str, text: str):
        self.path, self.text = path, text

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.path}:{_line_of(self.text, section, key)}: {msg}")

    def value(self, section, key, raw, default):
        kind = type(default)
        if raw == "inf" or raw == "-inf":
            raw = float(raw)
        if default is None and raw is None:
            return None
        if isinstance(raw, list):
            raw = [float(v) if isinstance(v, str) and v in ("inf", "-inf") else v for v in raw]
        if default is None or isinstance(default, float):
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                self.fail(section, key, f"{key} must be a number")
            return float(raw)
        if isinstance(default, bool):
            if not isinstance(raw, bool):
                self.fail(section, key, f"{key} must be true or false")
            return raw
        if isinstance(default, int):
            if isinstance(raw, bool) or not isinstance(raw, int):
                self.fail(section, key, f"{key} must be an integer")
            return raw
        if not isinstance(raw, kind):
            self.fail(section, key, f"{key} must be a {kind.__name__}")
        return raw

    def section(self, name, cls, raw):
        if not isinstance(raw, dict):
            self.fail(None, name, f"[{name}] must be a table")
        obj = cls()
        known = {f.name for f in fields(cls)}
        for key, val in raw.items():
            if key not in known:
                self.fail(name, key, f"unknown key {key!r} in [{name}]")
            setattr(obj, key, self.value(name, key, val, getattr(obj, key)))
        return obj


def loads(text: str, path: str = "<config>", fmt: str | None = None) -> ExperimentConfig:
    fmt = fmt or ("json" if path.endswith(".json") else "toml")
    try:
        if fmt == "json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"{path}:{m.group(1) if m else 1}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: top level must be a table")
    ld = _Loader(path, text)
    for key in raw:
        if key not in TOP_KEYS:
            ld.fail(None, key, f"unknown top-level key {key!r}")
    if raw.get("version") != VERSION:
        ld.fail(None, "version", f"version must be {VERSION!r}")
    cfg = ExperimentConfig(source=path if path != "<config>" else "")
    cfg.seed = ld.value(None, "seed", raw.get("seed", 0), 0)
    cfg.outdir = ld.value(None, "outdir", raw.get("outdir", "runs"), "runs")
    for name, cls in SECTIONS.items():
        if name in raw:
            setattr(cfg, name, ld.section(name, cls, raw[name]))
    _validate(cfg, ld)
    return cfg


def load(path: str) -> ExperimentConfig:
    return loads(Path(path).read_text(), str(path))


def _validate(cfg: ExperimentConfig, ld: _Loader) -> None:
    t = cfg.train
    if t.lambda_min > t.lambda_max:
        ld.fail("train", "lambda_min", "lambda_min exceeds lambda_max")
    if not t.budget > 0:
        ld.fail("train", "budget", "budget must be positive")
    if t.divergence not in ("exact", "hutchinson"):
        ld.fail("train", "divergence", "divergence must be 'exact' or 'hutchinson'")
    for key in ("max_outer", "batch", "eval_batch", "substeps"):
        if getattr(t, key) < 1:
            ld.fail("train", key, f"{key} must be at least 1")
    if cfg.problem.n_times < 2:
        ld.fail("problem", "n_times", "n_times must be at least 2")
    for m in cfg.problem.modes:
        if not isinstance(m, dict) or set(m) - MODE_KEYS or "kind" not in m:
            ld.fail("problem", "modes", f"mode entries take keys {sorted(MODE_KEYS)}")
    if cfg.collapse.profile not in ("geometric", "linear"):
        ld.fail("collapse", "profile", "profile must be 'geometric' or 'linear'")
    if cfg.collapse.n_members < 1:
        ld.fail("collapse", "n_members", "n_members must be at least 1")
    if cfg.geodesic.cells % 2:
        ld.fail("geodesic", "cells", "cells must be even")
    if not cfg.gamma.lambdas or any(not lam > 0 for lam in cfg.gamma.lambdas):
        ld.fail("gamma", "lambdas", "lambdas must be positive")
    if not cfg.gamma.seeds:
        ld.fail("gamma", "seeds", "seeds must be non-empty")
    for sec, key, kind in (("gamma", "lambdas", float), ("gamma", "seeds", int),
                           ("stability", "magnitudes", float), ("stability", "seeds", int),
                           ("geodesic", "times", float)):
        vals = getattr(getattr(cfg, sec), key)
        for v in vals:
            if isinstance(v, bool) or not isinstance(v, (int, float) if kind is float else int):
                ld.fail(sec, key, f"{key} entries must be {'numbers' if kind is float else 'integers'}")
    from .certify import AXES
    if cfg.stability.axis not in AXES:
        ld.fail("stability", "axis", f"axis must be one of {list(AXES)}")
    if cfg.certify.delta_safe < 0:
        ld.fail("certify", "delta_safe", "delta_safe must be nonnegative")
