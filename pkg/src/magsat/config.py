"""Human-readable ``key = value`` configuration files.

Files may be flat (no section headers) or use ``[section]`` headers as in
INI files. Comments start with ``#`` or ``;``.
"""

import configparser

ROOT = "root"


def read_sections(path):
    """Parse a key=value file into ``{section: {key: str}}``.

    Keys appearing before any ``[section]`` header land in ``ROOT``.
    """
    with open(path) as fh:
        return parse_sections(fh.read())


def parse_sections(text):
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    parser.optionxform = str  # keys are case-sensitive (R_ohm vs r_ohm)
    parser.read_string(f"[{ROOT}]\n" + text)
    return {name: dict(parser[name]) for name in parser.sections()}


def parse_floats(value, n=None):
    """Parse ``"1, 2 3"`` style lists of floats."""
    parts = value.replace(",", " ").split()
    out = [float(p) for p in parts]
    if n is not None and len(out) != n:
        raise ValueError(f"expected {n} numbers, got {len(out)}: {value!r}")
    return out


def parse_bool(value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
