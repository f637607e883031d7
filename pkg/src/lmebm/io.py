"""Model files (JSON) and dataset files (0/1 text lines)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Dataset, MachineSpec, WeightMatrix


class FormatError(ValueError):
    """Malformed model or dataset file."""

    def __init__(self, path, lineno, msg):
        self.path, self.lineno = path, lineno
        where = f"{path}:{lineno}" if lineno else f"{path}"
        super().__init__(f"{where}: {msg}")


def model_to_dict(spec: MachineSpec, weights: WeightMatrix, selection: str | None = None) -> dict:
    out = {
        "visible_count": spec.visible_count,
        "hidden_count": spec.hidden_count,
        "weights": [
            {"a": a, "b": b, "value": float(v)} for (a, b), v in zip(spec.pairs, weights.values)
        ],
    }
    if selection is not None:
        out["selection"] = selection
    return out


def write_model(path, spec: MachineSpec, weights: WeightMatrix, selection: str | None = None):
    # json writes floats with repr, which round-trips every double exactly
    text = json.dumps(model_to_dict(spec, weights, selection), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def model_from_dict(doc: dict, path="<model>") -> tuple[MachineSpec, WeightMatrix]:
    try:
        j = int(doc["visible_count"])
        l = int(doc["hidden_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, None, f"missing or invalid counts: {exc}") from None
    spec = MachineSpec(j, l)
    values = np.zeros(spec.num_features)
    seen = set()
    for entry in doc.get("weights", []):
        try:
            a, b, v = int(entry["a"]), int(entry["b"]), float(entry["value"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, None, f"bad weight entry {entry!r}: {exc}") from None
        if not 0 <= a < b < spec.num_nodes:
            raise FormatError(path, None, f"weight pair ({a}, {b}) outside the strict upper triangle")
        if (a, b) in seen:
            raise FormatError(path, None, f"duplicate weight pair ({a}, {b})")
        seen.add((a, b))
        values[spec.feature_index(a, b)] = v
    try:
        weights = WeightMatrix(values, spec.num_nodes)
    except ValueError as exc:
        raise FormatError(path, None, str(exc)) from None
    return spec, weights


def read_model(path) -> tuple[MachineSpec, WeightMatrix]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, exc.msg) from None
    return model_from_dict(doc, path)


def read_dataset(path, width: int | None = None) -> Dataset:
    """One observation per line; bits may be space separated or packed."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        tokens = text.split()
        if len(tokens) == 1:
            tokens = list(tokens[0])
        if any(t not in ("0", "1") for t in tokens):
            raise FormatError(path, lineno, f"expected 0/1 entries, got {text!r}")
        if width is None:
            width = len(tokens)
        if len(tokens) != width:
            raise FormatError(path, lineno, f"expected {width} entries, got {len(tokens)}")
        rows.append([int(t) for t in tokens])
    if not rows:
        raise FormatError(path, None, "no observations")
    return Dataset(np.array(rows, dtype=np.int8))


def write_dataset(path, data: Dataset):
    lines = [" ".join(str(int(v)) for v in row) for row in data.observations]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
