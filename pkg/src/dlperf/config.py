"""Plain-text ``key = value`` run configuration.

Resolution order is command-line flags, then the config file, then defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Bad config file or value; the message names the key."""


@dataclass(frozen=True)
class Option:
    key: str
    type: type
    default: object
    help: str
    choices: tuple | None = None

    def parse(self, raw):
        if raw is None or not isinstance(raw, str):
            return raw
        text = raw.strip()
        if text == "":
            return None
        try:
            if self.type is bool:
                low = text.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            value = self.type(text)
        except ValueError:
            raise ConfigError(f"{self.key}: cannot parse {raw!r} as {self.type.__name__}") from None
        if self.choices and value not in self.choices:
            raise ConfigError(f"{self.key}: {value!r} is not one of {', '.join(map(str, self.choices))}")
        return value


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(options, file_values: dict | None = None, flag_values: dict | None = None) -> dict:
    """Merge defaults, file values and flags (highest precedence) into typed values."""
    table = {o.key: o for o in options}
    file_values = file_values or {}
    unknown = sorted(set(file_values) - set(table))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    resolved = {}
    for key, opt in table.items():
        value = opt.default
        if key in file_values:
            value = opt.parse(file_values[key])
        flag = (flag_values or {}).get(key)
        if flag is not None:
            value = opt.parse(flag)
        if opt.choices and value is not None and value not in opt.choices:
            raise ConfigError(f"{key}: {value!r} is not one of {', '.join(map(str, opt.choices))}")
        resolved[key] = value
    return resolved


def format_config(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        lines.append(f"{key} = {'' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
