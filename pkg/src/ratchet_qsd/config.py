"""Run configuration: strict JSON parsing, validation and a stable digest.

A config is a flat JSON object.  Every key is listed in ``FIELDS``; unknown
keys are rejected so that typos never pass silently.  ``threads`` and
``out`` only steer execution and are excluded from the digest.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

from .errors import ParseError, ValidationError

SCHEMA_VERSION = 1

MODELS = ("diffusion", "aggregated", "discrete")
EXPERIMENTS = (
    "simulate", "qsd", "eta", "qprocess", "correlations", "relaxation",
    "tightness", "autonomy", "compare", "clickstats",
)
NAMED_STARTS = ("delta0", "poisson", "qsd")
_NOT_DIGESTED = ("threads", "out")


@dataclass(frozen=True)
class RunConfig:
    alpha: float
    lam: float
    d: int
    seed: int
    model: str = "diffusion"
    experiment: str | None = None
    k: int | None = None
    dt: float = 1e-3
    t_max: float = 1.0
    record_stride: int = 100
    replicates: int = 1000
    particles: int = 2000
    horizon: float = 40.0
    burn_in: float = 0.5
    snapshot_dt: float = 0.5
    x0: object = "delta0"
    population: int = 1000
    t: float = 1.0
    guard: float = 1.0
    t_step: float = 0.1
    t_end: float = 1.0
    ks: tuple = (1, 2, 3)
    min_survival: float = 0.9
    bins: int = 20
    d_list: tuple = (15, 30)
    moment_k: int = 3
    quantile: float = 0.95
    x_head: tuple | None = None
    tail_a: tuple | None = None
    tail_b: tuple | None = None
    full: bool = False
    checks: bool = True
    n_boot: int = 100
    threads: int | None = None
    out: str | None = None

    def resolved(self, runtime: bool = False) -> dict:
        """Plain-JSON view (``lambda`` spelled as in the file).

        Execution-only keys (``threads``, ``out``) are left out unless
        ``runtime`` is set, so the copy written next to the results is the
        same for every thread count.
        """
        d = asdict(self)
        if not runtime:
            for key in _NOT_DIGESTED:
                d.pop(key)
        d["lambda"] = d.pop("lam")
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return dict(sorted(d.items()))

    def digest(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def with_(self, **kw) -> "RunConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return validate(RunConfig(**vals))


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _num(name, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    def check(v):
        ok = _is_int(v) if integer else _is_num(v)
        kind = "an integer" if integer else "a finite number"
        if not ok:
            raise ValidationError(name, f"must be {kind}")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValidationError(name, f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValidationError(name, f"must be {'<' if hi_open else '<='} {hi}")
        return float(v) if not integer else int(v)
    return check


def _choice(name, options):
    def check(v):
        if v not in options:
            raise ValidationError(name, f"must be one of {', '.join(options)}")
        return v
    return check


def _optional(check):
    def wrapped(v):
        return None if v is None else check(v)
    return wrapped


def _vector(name, integer=False, nonneg=True, min_len=1):
    def check(v):
        if not isinstance(v, list) or len(v) < min_len:
            raise ValidationError(name, f"must be a list with at least {min_len} entries")
        item = _num(name, lo=0 if nonneg else None, integer=integer)
        return tuple(item(x) for x in v)
    return check


def _start(v):
    if isinstance(v, str):
        return _choice("x0", NAMED_STARTS)(v)
    return _vector("x0")(v)


def _bool(name):
    def check(v):
        if not isinstance(v, bool):
            raise ValidationError(name, "must be true or false")
        return v
    return check


def _text(name):
    def check(v):
        if not isinstance(v, str) or not v:
            raise ValidationError(name, "must be a nonempty string")
        return v
    return check


# key in the file -> (attribute name, validator)
FIELDS = {
    "alpha": ("alpha", _num("alpha", lo=0)),
    "lambda": ("lam", _num("lambda", lo=0)),
    "d": ("d", _num("d", lo=1, hi=10_000, integer=True)),
    "seed": ("seed", _num("seed", lo=0, hi=2**64 - 1, integer=True)),
    "model": ("model", _choice("model", MODELS)),
    "experiment": ("experiment", _optional(_choice("experiment", EXPERIMENTS))),
    "k": ("k", _optional(_num("k", lo=1, integer=True))),
    "dt": ("dt", _num("dt", lo=0, hi=0.1, lo_open=True)),
    "t_max": ("t_max", _num("t_max", lo=0, lo_open=True)),
    "record_stride": ("record_stride", _num("record_stride", lo=1, integer=True)),
    "replicates": ("replicates", _num("replicates", lo=1, hi=10**8, integer=True)),
    "particles": ("particles", _num("particles", lo=1, hi=10**7, integer=True)),
    "horizon": ("horizon", _num("horizon", lo=0, lo_open=True)),
    "burn_in": ("burn_in", _num("burn_in", lo=0, hi=1, hi_open=True)),
    "snapshot_dt": ("snapshot_dt", _num("snapshot_dt", lo=0, lo_open=True)),
    "x0": ("x0", _start),
    "population": ("population", _num("population", lo=1, hi=10**9, integer=True)),
    "t": ("t", _num("t", lo=0, lo_open=True)),
    "guard": ("guard", _num("guard", lo=0)),
    "t_step": ("t_step", _num("t_step", lo=0, lo_open=True)),
    "t_end": ("t_end", _num("t_end", lo=0, lo_open=True)),
    "ks": ("ks", _vector("ks", integer=True)),
    "min_survival": ("min_survival", _num("min_survival", lo=0, hi=1)),
    "bins": ("bins", _num("bins", lo=1, hi=1000, integer=True)),
    "d_list": ("d_list", _vector("d_list", integer=True)),
    "moment_k": ("moment_k", _num("moment_k", lo=1, hi=8, integer=True)),
    "quantile": ("quantile", _num("quantile", lo=0, hi=1, lo_open=True, hi_open=True)),
    "x_head": ("x_head", _optional(_vector("x_head"))),
    "tail_a": ("tail_a", _optional(_vector("tail_a"))),
    "tail_b": ("tail_b", _optional(_vector("tail_b"))),
    "full": ("full", _bool("full")),
    "checks": ("checks", _bool("checks")),
    "n_boot": ("n_boot", _num("n_boot", lo=2, hi=100_000, integer=True)),
    "threads": ("threads", _optional(_num("threads", lo=1, hi=1024, integer=True))),
    "out": ("out", _optional(_text("out"))),
}
REQUIRED = ("alpha", "lambda", "d", "seed")


def _no_duplicates(pairs):
    out = {}
    for key, val in pairs:
        if key in out:
            raise ParseError(f"duplicate key {key!r}", field=key)
        out[key] = val
    return out


def _line_of(text: str, key: str) -> int | None:
    needle = json.dumps(key)
    for n, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return n
    return None


def from_dict(raw: dict, text: str | None = None) -> RunConfig:
    """Validate a decoded JSON object into a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ParseError("config must be a JSON object", line=1)
    for key in raw:
        if key not in FIELDS:
            exc = ValidationError(key, "unknown key")
            exc.line = _line_of(text, key) if text is not None else None
            raise exc
    for key in REQUIRED:
        if key not in raw:
            raise ValidationError(key, "required key missing")
    kw = {}
    for key, val in raw.items():
        attr, check = FIELDS[key]
        try:
            kw[attr] = check(val)
        except ValidationError as exc:
            if text is not None:
                exc.line = _line_of(text, key)
            raise
    return validate(RunConfig(**kw))


def validate(cfg: RunConfig) -> RunConfig:
    """Cross-field checks."""
    strict = cfg.model != "discrete" and cfg.experiment not in (None, "simulate", "compare")
    if strict and (cfg.alpha <= 0 or cfg.lam <= 0):
        raise ValidationError("alpha", "alpha and lambda must be > 0 for this experiment")
    if cfg.model == "aggregated" and (cfg.k is None or cfg.k > cfg.d):
        raise ValidationError("k", f"aggregated model needs 1 <= k <= d = {cfg.d}")
    if cfg.k is not None and cfg.k > cfg.d:
        raise ValidationError("k", f"must be <= d = {cfg.d}")
    if cfg.t_max < cfg.dt:
        raise ValidationError("t_max", "must be >= dt")
    if isinstance(cfg.x0, tuple) and len(cfg.x0) != cfg.d + 1:
        raise ValidationError("x0", f"must have d + 1 = {cfg.d + 1} entries")
    if any(kk > cfg.d for kk in cfg.ks):
        raise ValidationError("ks", f"entries must be <= d = {cfg.d}")
    if list(cfg.d_list) != sorted(set(cfg.d_list)):
        raise ValidationError("d_list", "must be strictly increasing")
    if cfg.model == "discrete" and cfg.alpha / cfg.population >= 1:
        raise ValidationError("alpha", "alpha / population must be < 1")
    return cfg


def parse_config_text(text: str) -> RunConfig:
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    except ParseError as exc:
        if exc.field is not None:
            exc.line = _line_of(text, exc.field)
        raise
    return from_dict(raw, text)


def parse_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}") from None
    return parse_config_text(text)
