"""Run configuration: ``section.key = value`` text files.

Comments start with ``#``.  ``phantom.ellipse`` may repeat; each entry is
``cx, cy, a, b, angle_deg, value[, growth]``.  Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ranges(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"range {part!r} must be lo:hi")
        out.append((float(lo), float(hi)))
    return out


def _fmt_ranges(ranges) -> str:
    return ", ".join(f"{lo!r}:{hi!r}" for lo, hi in ranges)


# (type, default); default None means required when the section is used
SCHEMA: dict[str, dict[str, tuple]] = {
    "phantom": {
        "kind": (str, None),
        "nx": (int, 128),
        "ny": (int, None),
        "nz": (int, 1),
        "n_frames": (int, 1),
    },
    "geometry": {
        "kind": (str, "parallel2d"),
        "n_channels": (int, None),
        "n_rows": (int, None),
        "channel_pitch": (float, None),
        "voxel_size": (float, None),
        "tilt_deg": (float, 0.0),
        "schedule": (str, "uniform"),
        "n_views": (int, 45),
        "range_lo": (float, 0.0),
        "range_hi": (float, 180.0),
        "views_per_frame": (int, None),
        "blocked": (_ranges, []),
        "step_factor": (float, 0.5),
    },
    "corruption": {
        "dose_I0": (float, 1e4),
        "view_gain_sigma": (float, 0.0),
        "view_offset": (float, 0.0),
        "channel_gain_sigma": (float, 0.0),
        "zinger_rate": (float, 0.0),
        "zinger_amplitude": (float, 0.0),
        "seed": (int, 0),
        "mode": (str, "transmission"),
        "noise_sigma": (float, 0.0),
    },
    "fidelity": {
        "kind": (str, "wls"),
        "T": (float, 3.0),
        "delta": (float, 0.5),
        "nu": (float, 5.0),
        "sigma": (float, 1.0),
    },
    "prior": {
        "kind": (str, "qggmrf"),
        "p": (float, 1.2),
        "q": (float, 2.0),
        "T": (float, 1.0),
        "sigma_x": (float, 0.1),
        "beta_s": (float, 1e-4),
        "beta_t": (float, 0.0),
    },
    "calibration": {
        "mode": (str, "none"),
    },
    "recon": {
        "max_outer_iters": (int, 200),
        "stop_rel_cost": (float, 1e-6),
        "stop_rel_x": (float, 1e-5),
        "nonneg": (_bool, True),
        "multires_levels": (int, 1),
        "multires_iters": (int, 10),
        "init": (str, "zero"),
        "calib_every": (int, 1),
        "seed": (int, 0),
        "robust_refresh": (str, "per_sweep"),
        "fbp_filter": (str, "ramlak"),
    },
    "output": {
        "pgm": (_bool, True),
        "window_lo": (float, None),
        "window_hi": (float, None),
    },
}

REPEATED = {"phantom.ellipse"}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # "section.key" -> typed value
    ellipses: list = field(default_factory=list)  # tuples of floats

    def has(self, key: str) -> bool:
        return key in self.values

    def get(self, key: str, default=None):
        if key in self.values:
            return self.values[key]
        section, name = key.split(".", 1)
        schema_default = SCHEMA[section][name][1]
        return default if schema_default is None else schema_default

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise ConfigError(f"missing required key {key}")
        return value

    def set(self, key: str, text: str) -> None:
        """Set a key from its textual form (used by parameter sweeps)."""
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown parameter {key}")
        try:
            self.values[key] = SCHEMA[section][name][0](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def resolved_text(self) -> str:
        """Every key with its effective value; parsing this text reproduces the run."""
        lines = []
        for section, keys in SCHEMA.items():
            for name, (typ, default) in keys.items():
                key = f"{section}.{name}"
                value = self.values.get(key, default)
                if value is None:
                    continue
                if typ is _ranges:
                    text = _fmt_ranges(value)
                elif typ is float:
                    text = repr(float(value))
                else:
                    text = str(value)
                lines.append(f"{key} = {text}")
            if section == "phantom":
                for e in self.ellipses:
                    lines.append("phantom.ellipse = " + ", ".join(repr(float(v)) for v in e))
        return "\n".join(lines) + "\n"

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text())


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if key in REPEATED:
            try:
                nums = tuple(float(v) for v in value.split(","))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad ellipse {value!r}") from exc
            if len(nums) not in (6, 7):
                raise ConfigError(f"{source}:{lineno}: ellipse needs 6 or 7 numbers")
            cfg.ellipses.append(nums)
            continue
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key}")
        try:
            cfg.values[key] = SCHEMA[section][name][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
