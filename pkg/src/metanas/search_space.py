"""Architecture strings: validation, text format, decoding into a layer DAG.

An architecture is a list of layers ``1..L``.  Layer ``k`` carries an op from
:data:`OPS` and a skip vector of ``k - 1`` bits; bit ``i`` (1-indexed) selects
layer ``i``.  Layer ``k``'s own output always flows on to the next stage; its
selected skip layers are concatenated with it (ascending layer order, along
depth) to form the input of layer ``k + 1``, or of the terminal node when
``k == L``.  Layer 1 reads the image, denoted layer 0.

Text format, one clause per layer separated by ``;``::

    conv3; conv5 skips=1; sep3 skips=01

A clause is ``<op>`` optionally followed by ``skips=<bits>``.  Omitting
``skips=`` means all-zero bits; layer 1 must have none.  Whitespace around
tokens is ignored.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

from .exceptions import ArchitectureParseError, InvalidArchitectureError

OPS = ("conv3", "conv5", "conv7", "sep3", "sep5", "sep7", "avgpool3", "maxpool3")
N_OPS = len(OPS)
_OP_INDEX = {name: i for i, name in enumerate(OPS)}


def op_kind(op: int) -> tuple[str, int]:
    """``(family, kernel size)`` for an op id, family in {conv, sep, avg, max}."""
    name = OPS[op]
    if name.startswith("conv"):
        return "conv", int(name[4:])
    if name.startswith("sep"):
        return "sep", int(name[3:])
    return name[:3], 3


@dataclass(frozen=True)
class Layer:
    op: int
    skips: tuple[int, ...] = ()


@dataclass(frozen=True)
class ArchitectureString:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    @classmethod
    def from_lists(cls, ops, skips):
        return cls(tuple(Layer(int(o), tuple(int(b) for b in s)) for o, s in zip(ops, skips)))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def ops(self) -> tuple[int, ...]:
        return tuple(layer.op for layer in self.layers)

    def __str__(self):
        return serialize(self)


def validate(arch: ArchitectureString) -> None:
    if not arch.layers:
        raise InvalidArchitectureError("architecture needs at least one layer")
    for k, layer in enumerate(arch.layers, start=1):
        if not isinstance(layer.op, int) or not 0 <= layer.op < N_OPS:
            raise InvalidArchitectureError(f"layer {k}: op id {layer.op!r} outside [0, {N_OPS})")
        if len(layer.skips) != k - 1:
            raise InvalidArchitectureError(
                f"layer {k}: skip vector has {len(layer.skips)} bits, expected {k - 1}")
        if any(b not in (0, 1) for b in layer.skips):
            raise InvalidArchitectureError(f"layer {k}: skip bits must be 0/1, got {layer.skips}")


# ---------------------------------------------------------------- decoding

@dataclass(frozen=True)
class DagLayer:
    op: int
    inputs: tuple[int, ...]
    consumed: bool


@dataclass(frozen=True)
class DagSpec:
    """Layer ``k`` (1-indexed) is ``layers[k - 1]``; input index 0 is the image."""

    layers: tuple[DagLayer, ...]
    terminal_inputs: tuple[int, ...]


def _stage_inputs(arch: ArchitectureString, k: int) -> tuple[int, ...]:
    """Inputs of the stage following layer ``k`` (``k == 0``: the image feeds layer 1)."""
    if k == 0:
        return (0,)
    skips = arch.layers[k - 1].skips
    return tuple(i for i in range(1, k) if skips[i - 1]) + (k,)


def decode(arch: ArchitectureString) -> DagSpec:
    if not isinstance(arch, ArchitectureString):
        raise InvalidArchitectureError(f"expected ArchitectureString, got {type(arch).__name__}")
    validate(arch)
    n = arch.n_layers
    inputs = [_stage_inputs(arch, k - 1) for k in range(1, n + 1)]
    terminal = _stage_inputs(arch, n)
    consumed = set(i for ins in inputs for i in ins)
    # With the chain backbone every layer below L is consumed; loose ends are
    # still gathered explicitly so the terminal never drops an output.
    loose = {k for k in range(1, n + 1) if k not in consumed}
    layers = tuple(DagLayer(arch.layers[k - 1].op, inputs[k - 1], k in consumed)
                   for k in range(1, n + 1))
    return DagSpec(layers, tuple(sorted(set(terminal) | loose)))


def input_depths(dag: DagSpec, channels: int, image_channels: int = 1) -> tuple[list[int], int]:
    """Input depth of every layer and of the terminal node."""
    def depth(ins):
        return sum(image_channels if i == 0 else channels for i in ins)
    return [depth(layer.inputs) for layer in dag.layers], depth(dag.terminal_inputs)


# ---------------------------------------------------------------- counting / enumeration

def space_size(n_layers: int) -> int:
    """Number of distinct architectures with ``n_layers`` layers: ``8^L * 2^(L(L-1)/2)``."""
    if n_layers < 1:
        raise InvalidArchitectureError(f"depth must be >= 1, got {n_layers}")
    return N_OPS ** n_layers * 2 ** (n_layers * (n_layers - 1) // 2)


def enumerate_architectures(n_layers: int):
    """Yield every architecture of the given depth (exponential; tiny depths only)."""
    per_layer = []
    for k in range(1, n_layers + 1):
        per_layer.append([Layer(op, bits) for op in range(N_OPS)
                          for bits in itertools.product((0, 1), repeat=k - 1)])
    for layers in itertools.product(*per_layer):
        yield ArchitectureString(layers)


def n_decisions(n_layers: int) -> int:
    return n_layers + n_layers * (n_layers - 1) // 2


# ---------------------------------------------------------------- text format

def serialize(arch: ArchitectureString) -> str:
    clauses = []
    for layer in arch.layers:
        clause = OPS[layer.op]
        if layer.skips:
            clause += " skips=" + "".join(str(b) for b in layer.skips)
        clauses.append(clause)
    return "; ".join(clauses)


_TOKEN = re.compile(r"[^\s;]+|;")


def parse(text: str) -> ArchitectureString:
    """Parse the text format; errors report the zero-based token index."""
    tokens = _TOKEN.findall(text)
    layers: list[Layer] = []
    pos = 0
    while pos < len(tokens):
        k = len(layers) + 1
        tok = tokens[pos]
        if tok not in _OP_INDEX:
            raise ArchitectureParseError(f"unknown op {tok!r}", pos)
        op = _OP_INDEX[tok]
        pos += 1
        skips: tuple[int, ...] = (0,) * (k - 1)
        if pos < len(tokens) and tokens[pos].startswith("skips="):
            bits = tokens[pos][len("skips="):]
            if not re.fullmatch(r"[01]*", bits) or len(bits) != k - 1:
                raise ArchitectureParseError(
                    f"layer {k} needs exactly {k - 1} skip bits, got {bits!r}", pos)
            skips = tuple(int(b) for b in bits)
            pos += 1
        layers.append(Layer(op, skips))
        if pos < len(tokens):
            if tokens[pos] != ";":
                raise ArchitectureParseError(f"expected ';', got {tokens[pos]!r}", pos)
            pos += 1
            if pos == len(tokens):
                raise ArchitectureParseError("trailing ';'", pos - 1)
    if not layers:
        raise ArchitectureParseError("empty architecture", 0)
    return ArchitectureString(tuple(layers))

