"""JSON text rendering with explicit float precision.

Model documents are written with 17 significant digits so that a
save -> load round-trip reproduces every float64 bit-exactly; wire
messages use 9 significant digits.
"""

from __future__ import annotations

import json
import math
from typing import Any

from .errors import FormatError


def render(obj: Any, sig_digits: int = 17) -> str:
    """Serialize nested dicts/lists/scalars to JSON text.

    Floats are rendered with ``%.<sig_digits>g``; non-finite floats are
    rejected because no document schema in this package allows them.
    """
    pieces: list[str] = []
    _render_into(obj, sig_digits, pieces)
    return "".join(pieces)


def _render_into(obj: Any, sig: int, out: list[str]) -> None:
    if obj is None or isinstance(obj, bool):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite float not representable: {obj!r}")
        out.append(format(obj, f".{sig}g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"document keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _render_into(value, sig, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, value in enumerate(obj):
            if i:
                out.append(",")
            _render_into(value, sig, out)
        out.append("]")
    else:
        raise TypeError(f"cannot render {type(obj).__name__} as JSON")


def parse(text: str) -> Any:
    return json.loads(text)


def write_document(path, doc: Any, sig_digits: int = 17) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(doc, sig_digits))
        fh.write("\n")


def read_document(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: parse error at offset {exc.pos}: "
                          f"{exc.msg}") from exc
