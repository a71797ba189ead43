"""Flat ``key = value`` configuration files shared by the node-side binaries."""

from __future__ import annotations

import configparser
from pathlib import Path


def load_kv(path: str | Path, section: str | None = None) -> dict[str, str]:
    """Read ``key = value`` lines (``#`` comments allowed, sections optional).

    Keys outside any section are always returned; when ``section`` is given its
    keys are merged on top.
    """
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string("[__top__]\n" + text)
    values = dict(parser["__top__"])
    if section and parser.has_section(section):
        values.update(parser[section])
    return values


def parse_address(address: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = str(address).rpartition(":")
    if not sep:
        host, port = default_host, address
    if not host:
        host = default_host
    return host, int(port)


def format_address(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"
