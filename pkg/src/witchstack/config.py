"""Run configuration.

Endpoints and scenarios read a small TOML file (flat keys, sections allowed
and flattened with dots):

    seed = 7
    ldm_mode = "strict"
    [link]
    port = 0            # 0 = pick a free port

Unknown keys are rejected so typos surface immediately.  Every field has a
default; an absent file or path of None yields the defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

__all__ = ["Config", "BadConfig", "load_config"]

LDM_MODES = ("strict", "vulnerable")
ENVELOPE_MODES = ("aead_mitigated", "faithful")


class BadConfig(Exception):
    pass


@dataclass
class Config:
    seed: int | None = None
    link_port: int = 0            # phone's virtual-link listener; 0 = ephemeral
    api_port: int = 0             # control API; 0 = ephemeral
    ldm_mode: str = "strict"
    envelope_mode: str = "aead_mitigated"
    sample_interval: float = 5.0  # watch heart-rate emit period, seconds
    keepalive_interval: float = 0.0  # 0 disables periodic echo frames
    connect_timeout: float = 5.0
    retry_backoff: float = 0.2
    store_path: str | None = None      # health store file; None = in-memory
    store_passphrase: str | None = None
    rules_path: str | None = None      # firewall rule persistence
    transcript_path: str | None = None
    alloy_log_path: str | None = None

    def __post_init__(self) -> None:
        if self.ldm_mode not in LDM_MODES:
            raise BadConfig("ldm_mode must be one of %r" % (LDM_MODES,))
        if self.envelope_mode not in ENVELOPE_MODES:
            raise BadConfig("envelope_mode must be one of %r" % (ENVELOPE_MODES,))


def _flatten(table: dict, prefix: str = "") -> dict:
    flat: dict = {}
    for key, value in table.items():
        name = prefix + key
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "_"))
        else:
            flat[name] = value
    return flat


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path, "rb") as handle:
            table = tomllib.load(handle)
    except OSError as exc:
        raise BadConfig("cannot read %s: %s" % (path, exc)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise BadConfig("cannot parse %s: %s" % (path, exc)) from exc
    flat = _flatten(table)
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise BadConfig("unknown config keys: %s" % ", ".join(unknown))
    try:
        return Config(**flat)
    except TypeError as exc:
        raise BadConfig(str(exc)) from exc
