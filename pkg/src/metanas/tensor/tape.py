"""Dense fp64 tensors and the gradient tape that records operations on them.

Recording is opt-in: primitives only append to a tape while one is active
(``with Tape() as tape:``) and at least one input requires a gradient.  Outside
a tape every primitive is a plain numpy computation, which keeps evaluation
passes cheap.
"""

from __future__ import annotations

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """An fp64 array with an optional ``requires_grad`` marker.

    The wrapped array is treated as a value.  Optimizers are the one exception:
    they update parameter tensors in place so that every holder of a parameter
    (e.g. several child networks viewing one shared weight bank) sees the change.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional forms live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Records are appended in execution order, so inputs always precede the
    operations consuming them.  ``gradient`` walks the records once, in
    reverse order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output: Tensor, inputs, backward) -> None:
        self.records.append(_Record(output, tuple(inputs), backward))

    def gradient(self, target: Tensor, sources, seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each of ``sources``.

        ``seed`` is the upstream gradient of ``target``; it defaults to ones, so
        for a scalar target this is the ordinary gradient.  Sources that do not
        influence the target get a zero array.
        """
        grads: dict[int, np.ndarray] = {}
        grads[id(target)] = (np.ones_like(target.data) if seed is None
                             else np.asarray(seed, dtype=np.float64))
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            input_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for src in sources:
            g = grads.get(id(src))
            out.append(np.zeros_like(src.data) if g is None else g)
        return out


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def make_result(data, inputs, backward) -> Tensor:
    """Wrap ``data`` as an op output, recording it when differentiation is live.

    ``backward`` maps the output gradient to a tuple with one entry (array or
    None) per input.
    """
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        for tape in _ACTIVE_TAPES:
            tape.record(out, inputs, backward)
    return out
