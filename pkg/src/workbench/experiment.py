"""Experiment files: line-oriented ``section.key = value`` text.

Sections are ``data``, ``noise``, ``model``, ``selector``, ``backbone`` and
``engine``; ``#`` starts a comment.  ``engine.preset`` (if given) is applied
to the explicitly configured base, and any preset-controlled key that the
file also sets explicitly wins over the preset.
"""

import re
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import NoiseSpec, gen_two_moons, inject_noise
from .engine import PRESETS, RunConfig, instantiate
from .selection import SELECTOR_KINDS, SelectorConfig
from .ssl import BACKBONE_KINDS, BackboneConfig

DATA_KINDS = ("two_moons", "mnist")
NOISE_KINDS = ("symmetric", "asymmetric", "none")


class ExperimentError(ValueError):
    """Every problem found in an experiment file, each tagged with its line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass
class DataSpec:
    kind: str = "two_moons"
    n: int = None  # training rows; None = 1000 for two_moons, the full file for mnist
    n_test: int = None  # None = 2000 for two_moons, the full file for mnist
    jitter: float = 0.1
    seed: int = 0


@dataclass
class Experiment:
    data: DataSpec = field(default_factory=DataSpec)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("symmetric", 0.4))
    run: RunConfig = field(default_factory=RunConfig)


# ---------------------------------------------------------------------------
# value converters: str -> value, raising ValueError with a readable message
# ---------------------------------------------------------------------------

def _int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _float(s):
    try:
        v = float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None
    if not np.isfinite(v):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _optional(conv):
    def parse(s):
        return None if s.lower() == "none" else conv(s)
    return parse


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _choice(options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _ratio(s):
    v = _float(s)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1], got {v}")
    return v


def _class_map(s):
    if s.lower() in ("default", "none"):
        return None
    out = {}
    for part in s.split(","):
        m = re.fullmatch(r"\s*(\d+)\s*:\s*(\d+)\s*", part)
        if not m:
            raise ValueError(f"class_map entries look like 2:7, got {part.strip()!r}")
        out[int(m.group(1))] = int(m.group(2))
    return out


def _preset(s):
    if s.lower() == "none":
        return ""
    return _choice(tuple(PRESETS))(s)


_CONVERTERS = {int: _int, float: _float, str: str}

# (section, attribute) -> converter; the attribute lives on the object the section maps to
KEYS = {
    ("data", "kind"): _choice(DATA_KINDS),
    ("data", "n"): _optional(_int),
    ("data", "n_test"): _optional(_int),
    ("data", "jitter"): _float,
    ("data", "seed"): _int,
    ("noise", "kind"): _choice(NOISE_KINDS),
    ("noise", "ratio"): _ratio,
    ("noise", "seed"): _int,
    ("noise", "include_self"): _bool,
    ("noise", "class_map"): _class_map,
    ("model", "hidden"): _int,
    ("engine", "preset"): _preset,
    ("engine", "schedule"): str,
    ("engine", "networks"): str,
    ("selector", "kind"): _choice(SELECTOR_KINDS),
    ("backbone", "kind"): _choice(BACKBONE_KINDS),
    ("backbone", "forced_lambda"): _optional(_float),
}
for _f in fields(SelectorConfig):
    KEYS.setdefault(("selector", _f.name), _CONVERTERS[type(_f.default)])
for _f in fields(BackboneConfig):
    KEYS.setdefault(("backbone", _f.name), _CONVERTERS.get(type(_f.default), _float))
for _name in ("epochs", "batch_size", "warmup_epochs", "lr", "momentum", "weight_decay",
              "lr_decay_epoch", "lr_decay_factor", "seed"):
    KEYS.setdefault(("engine", _name), _CONVERTERS[type(getattr(RunConfig, _name))])

# fields a preset overwrites
PRESET_KEYS = {("selector", "kind"), ("backbone", "kind"), ("backbone", "lambda_u"),
               ("backbone", "mixmatch_prior"), ("engine", "schedule"), ("engine", "networks")}


def _line_re():
    return re.compile(r"^([A-Za-z_]+)\.([A-Za-z_]+)\s*=\s*(.*?)\s*$")


def read_assignments(text):
    """Parse text into ``({(section, key): (raw value, line_no)}, problems)``."""
    out, problems = {}, []
    pat = _line_re()
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = pat.match(line)
        if not m:
            problems.append(f"line {no}: expected 'section.key = value', got {raw.strip()!r}")
            continue
        key = (m.group(1), m.group(2))
        if key not in KEYS:
            problems.append(f"line {no}: unknown key {key[0]}.{key[1]}")
            continue
        if key in out:
            problems.append(f"line {no}: {key[0]}.{key[1]} already set on line {out[key][1]}")
            continue
        out[key] = (m.group(3), no)
    return out, problems


def build(assignments, problems=()):
    """Turn parsed assignments into a validated ``Experiment``.

    Raises ``ExperimentError`` listing ``problems`` plus every conversion and
    validation failure; settings that failed to convert fall back to defaults
    so later checks still run.
    """
    problems = list(problems)
    values = {}
    for key, (raw, no) in assignments.items():
        try:
            values[key] = KEYS[key](raw)
        except ValueError as exc:
            problems.append(f"line {no}: {key[0]}.{key[1]}: {exc}")

    def pick(section):
        return {k: v for (s, k), v in values.items() if s == section}

    data = replace(DataSpec(), **pick("data"))
    nk = pick("noise")
    noise = NoiseSpec(nk.get("kind", "symmetric"), nk.get("ratio", 0.4), nk.get("class_map"),
                      nk.get("seed", 0), nk.get("include_self", False))
    engine = pick("engine")
    preset = engine.pop("preset", "")
    base = replace(RunConfig(), selector=replace(SelectorConfig(), **pick("selector")),
                   backbone=replace(BackboneConfig(), **pick("backbone")), **engine, **pick("model"))
    run = base
    if preset:
        run = instantiate(preset, base)
        explicit = {k: v for k, v in values.items() if k in PRESET_KEYS}
        run = replace(run,
                      selector=replace(run.selector, **{k: v for (s, k), v in explicit.items() if s == "selector"}),
                      backbone=replace(run.backbone, **{k: v for (s, k), v in explicit.items() if s == "backbone"}),
                      **{k: v for (s, k), v in explicit.items() if s == "engine"})

    def line_of(msg):
        hits = [no for (s, k), (_, no) in assignments.items() if f"{s}.{k}" in msg]
        if not hits and "dual" in msg:
            hits = [no for key, (_, no) in assignments.items()
                    if key in (("engine", "networks"), ("selector", "kind"), ("engine", "preset"))]
        return f"line {min(hits)}" if hits else "config"

    for msg in run.validate():
        problems.append(f"{line_of(msg)}: {msg}")
    n_classes = 2 if data.kind == "two_moons" else 10
    try:
        noise.validate(n_classes)
    except ValueError as exc:
        where = line_of("noise.class_map")
        problems.append(f"{where if where != 'config' else line_of('noise.kind')}: noise: {exc}")
    for name, v in (("data.n", data.n), ("data.n_test", data.n_test)):
        if v is not None and (v < 2 or (data.kind == "two_moons" and v % 2)):
            problems.append(f"{line_of(name)}: {name} must be >= 2 (and even for two_moons), got {v}")
    if data.jitter < 0:
        problems.append(f"{line_of('data.jitter')}: data.jitter must be nonnegative")
    if problems:
        raise ExperimentError(problems)
    return Experiment(data, noise, run)


def parse_text(text):
    return build(*read_assignments(text))


def parse_experiment(path):
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read())


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return ",".join(f"{a}:{b}" for a, b in sorted(v.items())) if v else "default"
    return str(v)


def serialize(exp):
    """Text form listing every field explicitly; ``parse_text(serialize(e)) == e``."""
    lines = ["# resolved experiment"]
    for f in fields(DataSpec):
        lines.append(f"data.{f.name} = {_fmt(getattr(exp.data, f.name))}")
    for name in ("kind", "ratio", "seed", "include_self", "class_map"):
        lines.append(f"noise.{name} = {_fmt(getattr(exp.noise, name))}")
    run = exp.run
    lines.append(f"model.hidden = {run.hidden}")
    for f in fields(SelectorConfig):
        lines.append(f"selector.{f.name} = {_fmt(getattr(run.selector, f.name))}")
    for f in fields(BackboneConfig):
        lines.append(f"backbone.{f.name} = {_fmt(getattr(run.backbone, f.name))}")
    lines.append(f"engine.preset = {run.preset or 'none'}")
    for name in ("schedule", "networks", "epochs", "batch_size", "warmup_epochs", "lr", "momentum",
                 "weight_decay", "lr_decay_epoch", "lr_decay_factor", "seed"):
        lines.append(f"engine.{name} = {_fmt(getattr(run, name))}")
    # re-applying the ce preset to (warm-up W, 0 epochs) gives W and 0 again, so every preset round-trips
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# materialising datasets
# ---------------------------------------------------------------------------

def load_datasets(exp):
    """``(noisy train, clean test)`` for an experiment."""
    d = exp.data
    if d.kind == "two_moons":
        train = gen_two_moons(d.n or 1000, d.jitter, seed=[d.seed, 0])
        test = gen_two_moons(d.n_test or 2000, d.jitter, seed=[d.seed, 1])
    else:
        from .mnist import load_mnist
        train, test, _ = load_mnist(n_train=d.n, n_test=d.n_test, seed=d.seed)
    return inject_noise(train, exp.noise), test
