"""Input validation helpers shared by the document parsers and estimators."""
from __future__ import annotations

import math
import re
from numbers import Integral, Real

import numpy as np
import yaml


class DocumentError(ValueError):
    """A problem/run document failed validation.

    ``code`` identifies the diagnostic family (``malformed``, ``unknown_key``,
    ``missing_field``, ``bound_inversion``, ``duplicate_name``,
    ``invalid_value``); ``line`` is 1-based when known.
    """

    def __init__(self, code, message, line=None):
        self.code = code
        self.line = line
        self.detail = message
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message} [{code}]")


class LineDict(dict):
    """dict that remembers the source line of each key (and of itself)."""

    line = None
    key_lines: dict

    def line_of(self, key):
        return self.key_lines.get(key, self.line)


class LineList(list):
    line = None


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = LineDict()
    out.key_lines = {}
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise DocumentError(
                "malformed", f"duplicate key {key!r}", key_node.start_mark.line + 1
            )
        out[key] = loader.construct_object(value_node, deep=True)
        out.key_lines[key] = key_node.start_mark.line + 1
    return out


def _construct_sequence(loader, node):
    out = LineList(loader.construct_object(child, deep=True) for child in node.value)
    out.line = node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)

# YAML 1.1 needs a dot in exponent floats ("1e-6" would load as a string).
_LineLoader.yaml_implicit_resolvers = {
    k: [r for r in v if r[0] != "tag:yaml.org,2002:float"]
    for k, v in yaml.SafeLoader.yaml_implicit_resolvers.items()}
_LineLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_tree(text):
    """Parse YAML or JSON text into dicts/lists that carry line numbers."""
    try:
        tree = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise DocumentError("malformed", str(exc.problem or exc), line) from None
    except yaml.YAMLError as exc:
        raise DocumentError("malformed", str(exc)) from None
    if not isinstance(tree, dict):
        raise DocumentError("malformed", "document root must be a mapping", 1)
    return tree


def line_of(node, key=None):
    if isinstance(node, LineDict):
        return node.line_of(key) if key is not None else node.line
    return getattr(node, "line", None)


def check_keys(mapping, where, required=(), optional=()):
    if not isinstance(mapping, dict):
        raise DocumentError("malformed", f"{where} must be a mapping", line_of(mapping))
    allowed = set(required) | set(optional)
    for key in mapping:
        if key not in allowed:
            raise DocumentError(
                "unknown_key", f"unknown key {key!r} in {where}", line_of(mapping, key)
            )
    for key in required:
        if key not in mapping:
            raise DocumentError(
                "missing_field", f"missing field {where}.{key}", line_of(mapping)
            )


def check_number(value, where, line=None, *, integer=False, minimum=None,
                 exclusive_minimum=None, maximum=None):
    if isinstance(value, bool) or not isinstance(value, Real):
        raise DocumentError("invalid_value", f"{where} must be a number, got {value!r}", line)
    if not math.isfinite(value):
        raise DocumentError("invalid_value", f"{where} must be finite", line)
    if integer:
        if not (isinstance(value, Integral) or float(value).is_integer()):
            raise DocumentError("invalid_value", f"{where} must be an integer, got {value!r}", line)
        value = int(value)
    if minimum is not None and value < minimum:
        raise DocumentError("invalid_value", f"{where} must be >= {minimum}, got {value!r}", line)
    if exclusive_minimum is not None and value <= exclusive_minimum:
        raise DocumentError(
            "invalid_value", f"{where} must be > {exclusive_minimum}, got {value!r}", line
        )
    if maximum is not None and value > maximum:
        raise DocumentError("invalid_value", f"{where} must be <= {maximum}, got {value!r}", line)
    return value


def check_choice(value, where, choices, line=None):
    if value not in choices:
        raise DocumentError(
            "invalid_value", f"{where} must be one of {sorted(choices)}, got {value!r}", line
        )
    return value


def check_points(X, n_features=None):
    """Return ``X`` as a finite 2-D float array, checking the column count."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D array of points, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features per point, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    return X


def check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, Integral) or not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


def derive_seed(*keys):
    """Hash a tuple of non-negative integers into one 64-bit seed."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
