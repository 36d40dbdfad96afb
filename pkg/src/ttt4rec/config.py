"""Flat ``key=value`` run configuration.

One key per line, ``#`` starts a comment. Every key has a default; unknown
keys and bad values are all reported together in one :class:`ConfigError`.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import parse_ratios
from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    checkpoint: str = "model.ckpt"
    report_dir: str = "reports"
    ratios: str = "3:2:5"
    min_seq_len: int = 5
    adapt_at_eval: bool = True
    cutoffs: str = "10,50"
    eval_batch_size: int = 128
    strict_parse: bool = False
    check_finite: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def cutoff_values(self):
        return tuple(int(c) for c in self.cutoffs.split(","))

    def lines(self):
        """Effective configuration as ``key=value`` lines (replayable)."""
        out = []
        for f in dataclasses.fields(self):
            if f.name == "model":
                continue
            out.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        for f in dataclasses.fields(self.model):
            out.append(f"{f.name}={_fmt(getattr(self.model, f.name))}")
        return out

    def text(self):
        return "\n".join(self.lines()) + "\n"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(raw, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _field_defaults(cls):
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls) if f.name != "model"}


def parse_config(text):
    run_defaults = _field_defaults(RunConfig)
    model_defaults = _field_defaults(ModelConfig)
    run_values, model_values, problems = {}, {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            problems.append(f"line {lineno}: expected key=value")
            continue
        if key in run_defaults:
            target, default = run_values, run_defaults[key]
        elif key in model_defaults:
            target, default = model_values, model_defaults[key]
        else:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            target[key] = _convert(raw, default)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if "ratios" in run_values:
        try:
            parse_ratios(run_values["ratios"])
        except ValueError as exc:
            problems.append(f"ratios: {exc}")
    if "cutoffs" in run_values:
        try:
            if any(int(c) < 1 for c in run_values["cutoffs"].split(",")):
                raise ValueError
        except ValueError:
            problems.append("cutoffs: expected comma-separated positive integers")
    try:
        model = ModelConfig(**model_values)
    except ConfigError as exc:
        problems.extend(exc.problems)
        model = None
    if problems:
        raise ConfigError(problems)
    return RunConfig(model=model, **run_values)


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))
