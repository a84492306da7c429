"""Named parameter store with a manifest + raw blob on-disk format.

``save("ckpt")`` writes ``ckpt.json`` (format tag, dtype, per-tensor name,
shape and byte offset, optional header) and ``ckpt.bin`` (little-endian
values, concatenated in manifest order).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Tensor

FORMAT_TAG = "grcvit-params-v1"
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


class ParamStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; zeros where backward never reached it."""
        return {n: (t.grad if t.grad is not None else np.zeros(t.shape)) for n, t in self._params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def save(self, path, header: dict | None = None) -> tuple[Path, Path]:
        manifest_path, blob_path = _paths(path)
        code = "<f4" if self.dtype == np.float32 else "<f8"
        entries, chunks, offset = [], [], 0
        for name, t in self._params.items():
            raw = np.ascontiguousarray(t.data, dtype=code).tobytes()
            entries.append({"name": name, "shape": list(t.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        doc = {"format": FORMAT_TAG, "dtype": code, "tensors": entries}
        if header is not None:
            doc["header"] = header
        manifest_path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        blob_path.write_bytes(b"".join(chunks))
        return manifest_path, blob_path

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict | None]:
        manifest_path, blob_path = _paths(path)
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"{manifest_path}: not a parameter manifest")
        code = doc["dtype"]
        if code not in _DTYPES:
            raise ValueError(f"unsupported blob dtype {code}")
        dtype = np.dtype(code)
        blob = blob_path.read_bytes()
        store = cls(_DTYPES[code])
        for e in doc["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            end = e["offset"] + count * dtype.itemsize
            if end > len(blob):
                raise ValueError(f"blob too short for tensor {e['name']}")
            arr = np.frombuffer(blob[e["offset"]:end], dtype=dtype).reshape(e["shape"])
            store.add(e["name"], arr)
        return store, doc.get("header")
