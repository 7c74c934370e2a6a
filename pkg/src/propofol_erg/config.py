"""Line-oriented ``key = value`` files with ``[section]`` headers.

Used for experiment configs and calibration bounds. ``#`` starts a comment;
every key must sit under a section header.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), strict=True)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: key outside a [section]: {exc.line.strip()!r}") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"line {lineno}: expected key = value, got {line}") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return {name: dict(parser[name]) for name in parser.sections()}


_SECTIONS = {
    "cohort": {"file", "n", "seed", "spread"},
    "controller": {"u_max_mlph"},
    "erg": {"kappa", "eta", "horizon", "grid_step", "inflation", "y_limit", "delta1_hold", "delta1_tau",
            "delta1_anchor", "pade_order", "bounds"},
    "sim": {"dt", "duration", "r", "noise_variance", "noise_is_std", "seed"},
    "output": {"dir"},
}


@dataclass
class ExperimentConfig:
    cohort_file: str | None = None
    cohort_generate: dict | None = None  # n, seed, spread
    controller: dict = field(default_factory=dict)
    erg: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    output_dir: str = "out"

    def __post_init__(self):
        if (self.cohort_file is None) == (self.cohort_generate is None):
            raise ConfigError("exactly one cohort source (file or n/seed/spread) is required")


def _num(s: str):
    try:
        return int(s)
    except ValueError:
        try:
            return float(s)
        except ValueError:
            return s


def load_experiment_config(path) -> ExperimentConfig:
    sec = parse_sections(Path(path).read_text())
    for name, vals in sec.items():
        if name not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{name}]")
        unknown = set(vals) - _SECTIONS[name]
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    cohort = sec.get("cohort", {})
    gen = None
    if {"n", "seed", "spread"} & set(cohort):
        gen = {"n": int(cohort.get("n", 44)), "seed": int(cohort.get("seed", 1)),
               "spread": float(cohort.get("spread", 0.15))}
    return ExperimentConfig(
        cohort_file=cohort.get("file"),
        cohort_generate=gen,
        controller={k: _num(v) for k, v in sec.get("controller", {}).items()},
        erg={k: _num(v) for k, v in sec.get("erg", {}).items()},
        sim={k: _num(v) for k, v in sec.get("sim", {}).items()},
        output_dir=sec.get("output", {}).get("dir", "out"),
    )
