"""Plain-text ``key=value`` run configuration with per-key range checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidInput


@dataclass(frozen=True)
class Param:
    kind: type
    default: object
    low: float | None = None
    high: float | None = None
    low_open: bool = False
    choices: tuple | None = None

    def parse(self, name, raw):
        if raw is None:
            return None
        if self.kind is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise InvalidInput(f"{name}: expected a boolean, got {raw!r}")
        try:
            value = self.kind(raw)
        except (TypeError, ValueError):
            raise InvalidInput(f"{name}: cannot parse {raw!r} as {self.kind.__name__}") from None
        if self.kind in (int, float):
            if isinstance(value, float) and not math.isfinite(value):
                raise InvalidInput(f"{name}: must be finite")
            if self.low is not None and (value < self.low or (self.low_open and value == self.low)):
                op = ">" if self.low_open else ">="
                raise InvalidInput(f"{name}: must be {op} {self.low}, got {value}")
            if self.high is not None and value > self.high:
                raise InvalidInput(f"{name}: must be <= {self.high}, got {value}")
        if self.choices is not None and value not in self.choices:
            raise InvalidInput(f"{name}: must be one of {', '.join(map(str, self.choices))}")
        return value


PARAMS = {
    # synth
    "frames": Param(int, 30, 1),
    "points": Param(int, 400, 4),
    "schedule": Param(str, "a", choices=("a", "b", "identity")),
    "bases": Param(int, 0, 0),
    "secondary": Param(float, 0.0, 0.0),
    "seed": Param(int, 0, 0),
    # dcmdr
    "k": Param(int, 0, 0),
    "alpha": Param(float, 1.0, 0.0, low_open=True),
    "beta": Param(float, None, 0.0),
    "lambda": Param(float, 1.0, 0.0),
    "rho": Param(float, 1.0, 0.0),
    "epsilon": Param(float, 0.1, 0.0, low_open=True),
    "max_iters": Param(int, 50, 0),
    "rel_tol": Param(float, 1e-6, 0.0),
    "grid": Param(str, "auto"),
    # dsp-build
    "mu": Param(float, 0.0, 0.0),
    "mu_grid": Param(str, ""),
    # dspr / compress
    "seeds": Param(int, 20, 1),
    "gamma": Param(float, 1.0, 0.0),
    "max_alternations": Param(int, 50, 1),
    "dspr_rel_tol": Param(float, 1e-8, 0.0),
    "refit_pose": Param(bool, True),
    # perturb / knockout
    "magnitude": Param(float, 0.0, 0.0),
    "ratio": Param(float, 0.0, 0.0, 1.0),
    "fill": Param(str, "frozen_reference", choices=("frozen_reference", "zeros")),
    # eval
    "align": Param(bool, True),
    "q": Param(int, 0, 0),
}

COMMAND_KEYS = {
    "synth": ("frames", "points", "schedule", "bases", "secondary", "seed"),
    "dcmdr": ("k", "alpha", "beta", "lambda", "rho", "epsilon", "max_iters", "rel_tol", "grid"),
    "dsp-build": ("mu", "mu_grid"),
    "dspr": ("seeds", "alpha", "beta", "gamma", "max_alternations", "dspr_rel_tol", "refit_pose"),
    "compress": ("seeds", "alpha", "beta", "gamma", "max_alternations", "dspr_rel_tol", "refit_pose"),
    "decompress": (),
    "perturb": ("magnitude", "seed"),
    "knockout": ("ratio", "fill", "seed"),
    "eval": ("align", "q"),
}


class RunConfig:
    """Validated parameters for one subcommand.

    Values come from the built-in defaults, then an optional config file,
    then explicit command-line flags.
    """

    def __init__(self, command: str, values: dict | None = None):
        if command not in COMMAND_KEYS:
            raise InvalidInput(f"unknown command {command!r}")
        self.command = command
        self.values = {k: PARAMS[k].default for k in COMMAND_KEYS[command]}
        self.update(values or {})

    def update(self, values: dict):
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in self.values:
                raise InvalidInput(f"unknown key {key!r} for command {self.command!r}")
            if raw is not None:
                self.values[key] = PARAMS[key].parse(key, raw)
        return self

    def __getitem__(self, key):
        return self.values[key]

    @staticmethod
    def parse_text(text: str) -> dict:
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInput(f"config line {lineno}: expected key=value")
            key, value = (x.strip() for x in line.split("=", 1))
            if not key:
                raise InvalidInput(f"config line {lineno}: empty key")
            if key in out:
                raise InvalidInput(f"config line {lineno}: duplicate key {key!r}")
            out[key] = value
        return out

    @classmethod
    def load(cls, command: str, path, overrides: dict | None = None):
        cfg = cls(command)
        if path is not None:
            with open(path) as fh:
                cfg.update(cls.parse_text(fh.read()))
        cfg.update(overrides or {})
        return cfg

    def dumps(self) -> str:
        lines = []
        for k, v in self.values.items():
            if v is None:
                continue
            lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"
