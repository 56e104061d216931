"""Child networks decoded from architecture strings, with ENAS-style weight sharing.

Every ``(layer, op)`` pair owns one parameter set in a :class:`SharedWeightBank`.
Kernels are allocated for the deepest input a layer can ever see
(``1`` image channel at layer 1, ``(k - 1) * channels`` at layer ``k``) and a
network whose layer input is shallower uses the leading input-channel slice.
The classifier head is ``[n_layers * channels, n_way]`` and is sliced the
same way.

Op semantics (all stride 1, same padding, followed by ReLU):

* ``convK``: ``K x K`` convolution to ``channels`` maps;
* ``sepK``: ``K x K`` depthwise conv then 1x1 pointwise conv to ``channels``;
* ``avgpool3`` / ``maxpool3``: 3x3 pooling then a 1x1 projection to ``channels``.

Flat parameter order (``param_vector``): layers ascending; within a layer
``kernel`` (conv), ``depth, point`` (sep) or ``proj`` (pool); then
``head.weight`` and ``head.bias``.  Each tensor is flattened row-major.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidConfigError, InvalidShapeError
from .search_space import N_OPS, OPS, DagSpec, op_kind
from .tensor import Tensor, checkpoint, ops


def _max_depth(k: int, channels: int, image_channels: int) -> int:
    return image_channels if k == 1 else (k - 1) * channels


def _entry_shapes(k: int, op: int, channels: int, image_channels: int) -> list[tuple[str, tuple]]:
    depth = _max_depth(k, channels, image_channels)
    kind, size = op_kind(op)
    if kind == "conv":
        return [("kernel", (channels, depth, size, size))]
    if kind == "sep":
        return [("depth", (depth, 1, size, size)), ("point", (channels, depth, 1, 1))]
    return [("proj", (channels, depth, 1, 1))]


def _init_array(role: str, shape: tuple, k: int, channels: int, image_channels: int,
                rng: np.random.Generator) -> np.ndarray:
    # He fan-in uses the nominal single-predecessor depth, not the padded worst case.
    nominal = image_channels if k == 1 else channels
    if role == "depth":
        fan_in = shape[2] * shape[3]
    elif role == "kernel":
        fan_in = nominal * shape[2] * shape[3]
    else:
        fan_in = nominal
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class SharedWeightBank:
    """All parameters any architecture of depth ``n_layers`` can use."""

    def __init__(self, n_layers: int, n_way: int, channels: int = 16, image_size: int = 16,
                 image_channels: int = 1, seed: int = 0):
        if n_layers < 1:
            raise InvalidConfigError(f"n_layers must be >= 1, got {n_layers}")
        if n_way < 2:
            raise InvalidConfigError(f"n_way must be >= 2, got {n_way}")
        if channels < 1:
            raise InvalidConfigError(f"channels must be >= 1, got {channels}")
        self.n_layers = n_layers
        self.n_way = n_way
        self.channels = channels
        self.image_size = image_size
        self.image_channels = image_channels
        self.entries: dict[tuple[int, int], list[Tensor]] = {}
        rng = np.random.default_rng(seed)
        for k in range(1, n_layers + 1):
            for op in range(N_OPS):
                self.entries[(k, op)] = [
                    Tensor(_init_array(role, shape, k, channels, image_channels, rng),
                           requires_grad=True, name=f"L{k}.{OPS[op]}.{role}")
                    for role, shape in _entry_shapes(k, op, channels, image_channels)]
        self.head = [Tensor(np.zeros((n_layers * channels, n_way)), requires_grad=True,
                            name="head.weight"),
                     Tensor(np.zeros(n_way), requires_grad=True, name="head.bias")]
        self.reset_head(rng)

    def reset_head(self, rng: np.random.Generator) -> None:
        fan_in = self.head[0].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        self.head[0].data[...] = rng.uniform(-bound, bound, size=self.head[0].shape)
        self.head[1].data[...] = rng.uniform(-bound, bound, size=self.head[1].shape)

    def reinitialize(self, rng: np.random.Generator) -> None:
        for (k, op), tensors in self.entries.items():
            for t, (role, shape) in zip(tensors, _entry_shapes(k, op, self.channels,
                                                              self.image_channels)):
                t.data[...] = _init_array(role, shape, k, self.channels, self.image_channels, rng)
        self.reset_head(rng)

    def parameters(self) -> list[Tensor]:
        out = []
        for key in sorted(self.entries):
            out.extend(self.entries[key])
        return out + self.head

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def save(self, path) -> None:
        checkpoint.save(path, [(t.name, t.data) for t in self.parameters()])

    def load(self, path) -> None:
        records = checkpoint.load(path)
        params = self.parameters()
        if [n for n, _ in records] != [t.name for t in params]:
            raise InvalidShapeError(f"{path}: checkpoint does not match this bank's layout")
        for t, (_, arr) in zip(params, records):
            if arr.shape != t.shape:
                raise InvalidShapeError(f"{path}: {t.name} has shape {arr.shape}, expected {t.shape}")
            t.data[...] = arr


class ChildNetwork:
    """A forward-runnable network for one ``DagSpec``.

    In shared mode the layer tensors ARE the bank's tensors; in fresh mode they
    are private re-initialized copies.
    """

    def __init__(self, dag: DagSpec, layer_params: list[list[Tensor]], head: list[Tensor],
                 n_way: int, channels: int, image_size: int, image_channels: int = 1,
                 dropout: float = 0.0, per_layer_dropout: bool = False, shared: bool = True):
        self.dag = dag
        self.layer_params = layer_params
        self.head = head
        self.n_way = n_way
        self.channels = channels
        self.image_size = image_size
        self.image_channels = image_channels
        self.dropout = dropout
        self.per_layer_dropout = per_layer_dropout
        self.shared = shared

    def parameters(self) -> list[Tensor]:
        out = [t for group in self.layer_params for t in group]
        return out + list(self.head)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def param_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.parameters()])

    def load_param_vector(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_parameters(),):
            raise InvalidShapeError(f"parameter vector has shape {theta.shape}, "
                                    f"expected ({self.n_parameters()},)")
        offset = 0
        for t in self.parameters():
            t.data[...] = theta[offset:offset + t.size].reshape(t.shape)
            offset += t.size

    def forward(self, images, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        expected = (self.image_channels, self.image_size, self.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise InvalidShapeError(f"images must be [B, {expected[0]}, {expected[1]}, "
                                    f"{expected[2]}], got {x.shape}")
        drop = self.dropout if train else 0.0
        outputs = {0: x}
        for k, (layer, params) in enumerate(zip(self.dag.layers, self.layer_params), start=1):
            inp = ops.concat([outputs[i] for i in layer.inputs], axis=1)
            out = ops.relu(_apply_op(layer.op, inp, params))
            if self.per_layer_dropout and drop:
                out = ops.dropout(out, drop, rng)
            outputs[k] = out
        feats = ops.global_avg_pool(ops.concat([outputs[i] for i in self.dag.terminal_inputs], axis=1))
        if drop and not self.per_layer_dropout:
            feats = ops.dropout(feats, drop, rng)
        d = feats.shape[1]
        weight, bias = self.head
        w = weight if d == weight.shape[0] else ops.getitem(weight, (slice(0, d), slice(None)))
        return ops.dense(feats, w, bias)

    __call__ = forward

    def predict(self, images) -> np.ndarray:
        return self.forward(images).data.argmax(axis=1)


def _leading(t: Tensor, d: int, axis: int) -> Tensor:
    if t.shape[axis] == d:
        return t
    index = [slice(None)] * t.ndim
    index[axis] = slice(0, d)
    return ops.getitem(t, tuple(index))


def _apply_op(op: int, x: Tensor, params: list[Tensor]) -> Tensor:
    d = x.shape[1]
    kind, _ = op_kind(op)
    if kind == "conv":
        return ops.conv2d(x, _leading(params[0], d, 1))
    if kind == "sep":
        return ops.depthwise_separable_conv2d(x, _leading(params[0], d, 0), _leading(params[1], d, 1))
    pooled = ops.pool2d(x, "avg" if kind == "avg" else "max", 3)
    return ops.conv2d(pooled, _leading(params[0], d, 1))


def build(bank: SharedWeightBank, dag: DagSpec, n_way: int, mode: str = "shared",
          rng: np.random.Generator | None = None, dropout: float = 0.0,
          per_layer_dropout: bool = False) -> ChildNetwork:
    """Wire a network for ``dag``.

    ``mode="shared"`` views the bank's tensors directly.  ``mode="fresh"``
    copies them and re-initializes every copy from ``rng``.
    """
    if n_way < 2:
        raise InvalidConfigError(f"n_way must be >= 2, got {n_way}")
    if n_way != bank.n_way:
        raise InvalidConfigError(f"bank head is {bank.n_way}-way, asked for {n_way}")
    if len(dag.layers) > bank.n_layers:
        raise InvalidConfigError(f"dag has {len(dag.layers)} layers, bank holds {bank.n_layers}")
    if mode not in ("shared", "fresh"):
        raise InvalidConfigError(f"unknown build mode {mode!r}")
    layer_params = [bank.entries[(k, layer.op)] for k, layer in enumerate(dag.layers, start=1)]
    head = bank.head
    if mode == "fresh":
        rng = np.random.default_rng(0) if rng is None else rng
        fresh_layers = []
        for k, (layer, group) in enumerate(zip(dag.layers, layer_params), start=1):
            shapes = _entry_shapes(k, layer.op, bank.channels, bank.image_channels)
            fresh_layers.append([
                Tensor(_init_array(role, shape, k, bank.channels, bank.image_channels, rng),
                       requires_grad=True, name=t.name)
                for t, (role, shape) in zip(group, shapes)])
        layer_params = fresh_layers
        bound = 1.0 / np.sqrt(head[0].shape[0])
        head = [Tensor(rng.uniform(-bound, bound, size=head[0].shape), True, "head.weight"),
                Tensor(rng.uniform(-bound, bound, size=head[1].shape), True, "head.bias")]
    return ChildNetwork(dag, layer_params, head, n_way, bank.channels, bank.image_size,
                        bank.image_channels, dropout, per_layer_dropout, shared=(mode == "shared"))
