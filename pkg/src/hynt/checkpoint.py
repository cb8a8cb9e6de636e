"""Named-tensor container: one raw little-endian blob plus a text manifest.

Manifest lines are ``name<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes`` with the
shape written as comma-separated dims (empty for scalars). Tensors are stored
in the order given, so writing the same mapping twice yields identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "tensors.manifest"
BLOB = "tensors.bin"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def save_tensors(directory, tensors: Mapping[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    offset = 0
    with open(directory / BLOB, "wb") as blob:
        for name, arr in tensors.items():
            if any(c in name for c in "\t\n"):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            arr = np.asarray(arr)
            code = arr.dtype.kind + str(arr.dtype.itemsize)
            if code not in _DTYPES:
                raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            blob.write(raw)
            shape = ",".join(str(n) for n in arr.shape)
            lines.append(f"{name}\t{code}\t{shape}\t{offset}\t{len(raw)}\n")
            offset += len(raw)
    with open(directory / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def load_tensors(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    raw = (directory / BLOB).read_bytes()
    out: dict[str, np.ndarray] = {}
    with open(directory / MANIFEST, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{directory / MANIFEST}:{lineno}: malformed manifest line")
            name, code, shape, offset, nbytes = parts
            dims = tuple(int(n) for n in shape.split(",")) if shape else ()
            start, size = int(offset), int(nbytes)
            arr = np.frombuffer(raw[start : start + size], dtype=_DTYPES[code]).reshape(dims)
            out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out


CONFIG = "config.txt"
ENTITIES = "entities.txt"
RELATIONS = "relations.txt"
NORMALIZATION = "normalization.txt"


def save_model(directory, model, vocab, table=None) -> None:
    """Write everything needed to reload ``model`` and predict with it.

    Layout: the tensor container, ``config.txt`` (``key=value`` per model
    setting), ``entities.txt`` (one name per line, in id order),
    ``relations.txt`` (``name<TAB>discrete|numeric``) and
    ``normalization.txt``.
    """
    from .ingest import NormalizationTable

    directory = Path(directory)
    save_tensors(directory, model.state_dict())
    with open(directory / CONFIG, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in model.config.to_dict().items():
            fh.write(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n")
    with open(directory / ENTITIES, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{name}\n" for name in vocab.entities)
    with open(directory / RELATIONS, "w", encoding="utf-8", newline="\n") as fh:
        for i, name in enumerate(vocab.relations):
            fh.write(f"{name}\t{'numeric' if vocab.is_numeric(i) else 'discrete'}\n")
    (table or NormalizationTable()).dump(directory / NORMALIZATION, vocab)


def read_config(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            values[key.strip()] = value.strip()
    return values


def load_model(directory):
    """Inverse of :func:`save_model`; returns ``(model, vocab, table)``."""
    from .ingest import NormalizationTable
    from .kg import Bijection, Vocabulary
    from .model import HyNT, HyntConfig

    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise FileNotFoundError(f"{directory} is not a checkpoint (no {MANIFEST})")
    config = HyntConfig.from_dict(read_config(directory / CONFIG))
    config.validate()
    with open(directory / ENTITIES, encoding="utf-8") as fh:
        entities = Bijection(line.rstrip("\n") for line in fh)
    relations = Bijection()
    numeric = set()
    with open(directory / RELATIONS, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            name, sep, kind = line.rstrip("\n").partition("\t")
            if not sep or kind not in ("discrete", "numeric"):
                raise ValueError(f"{directory / RELATIONS}:{lineno}: expected 'name<TAB>discrete|numeric'")
            rid = relations.add(name)
            if kind == "numeric":
                numeric.add(rid)
    vocab = Vocabulary(entities, relations, numeric)
    table = NormalizationTable.load(directory / NORMALIZATION, vocab)
    model = HyNT(config, vocab.num_entities, vocab.num_relations)
    model.load_state_dict(load_tensors(directory))
    return model, vocab, table
