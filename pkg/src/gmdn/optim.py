"""Parameter storage, Adam, and named-tensor checkpoints."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DTYPE, NonFiniteError, Tape, Tensor


@dataclass
class ParamStore:
    """Named parameters plus Adam first/second moments and a step counter."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def leaves(self, tape: Tape | None) -> dict[str, Tensor]:
        """Wrap every parameter as a tensor (differentiable if ``tape`` given)."""
        if tape is None:
            return {k: Tensor(v, name=k) for k, v in self.params.items()}
        return {k: tape.leaf(v, name=k) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam descent step, applied in place.

    To ascend an objective, pass the gradients of its negation.
    """
    if set(grads) != set(store.params):
        missing = set(store.params) ^ set(grads)
        raise KeyError(f"gradients do not align with parameters: {sorted(missing)}")
    for k, g in grads.items():
        if g.shape != store.params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        m = store.m[k] = beta1 * store.m[k] + (1.0 - beta1) * g
        v = store.v[k] = beta2 * store.v[k] + (1.0 - beta2) * g * g
        store.params[k] = store.params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ----------------------------------------------------------------------
# checkpoints: npz container, names prefixed by section

def save_store(store: ParamStore, path, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {"meta/step": np.array(store.step, dtype=np.int64)}
    for k in store.params:
        arrays[f"param/{k}"] = store.params[k]
        arrays[f"m/{k}"] = store.m[k]
        arrays[f"v/{k}"] = store.v[k]
    for k, a in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(a)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_store(path) -> tuple[ParamStore, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        store = ParamStore(step=int(data["meta/step"]))
        extra = {}
        for key in data.files:
            section, _, name = key.partition("/")
            if section == "param":
                store.params[name] = data[key].astype(DTYPE)
                store.m[name] = data[f"m/{name}"].astype(DTYPE)
                store.v[name] = data[f"v/{name}"].astype(DTYPE)
            elif section == "extra":
                extra[name] = data[key]
    return store, extra
