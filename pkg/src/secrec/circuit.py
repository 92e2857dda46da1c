"""Arithmetic circuits for two-party polynomial evaluation.

A circuit is a gate list plus per-gate input-wire tuples, in topological
order (wires only point backwards) with the last gate as the single output.
Input gates carry an owner; ownership-aware compaction collapses any subtree
that one party can evaluate alone into a single local-expression gate, so the
interactive protocol only ever sees gates that genuinely mix the two parties.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable


class Party(Enum):
    KEY_HOLDER = "A"
    EVALUATOR = "B"


class GateKind(Enum):
    INPUT = "input"
    ADD = "add"
    MUL = "mul"
    LOCAL = "local"


class CircuitError(ValueError):
    """Malformed gate list or wire indices."""


class MissingAssignmentError(KeyError):
    """An input variable has no assigned value."""


class LevelBoundError(ValueError):
    """Result level does not fit the ring at the chosen scale."""


@dataclass(frozen=True)
class Gate:
    kind: GateKind
    owner: Party | None = None
    var_key: object = None
    # Local gates evaluate a captured subtree over the owner's raw inputs.
    expr: Callable[[dict], float] | None = None


@dataclass(frozen=True)
class Circuit:
    gates: tuple[Gate, ...]
    wires: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.gates) != len(self.wires):
            raise CircuitError("gate and wire lists differ in length")
        if not self.gates:
            raise CircuitError("empty circuit")
        for i, (gate, inputs) in enumerate(zip(self.gates, self.wires)):
            if gate.kind in (GateKind.INPUT, GateKind.LOCAL):
                if inputs:
                    raise CircuitError(f"gate {i}: leaf gates take no wires")
                if gate.owner is None:
                    raise CircuitError(f"gate {i}: leaf gates need an owner")
            else:
                if len(inputs) != 2:
                    raise CircuitError(f"gate {i}: add/mul gates are binary")
                if any(j >= i or j < 0 for j in inputs):
                    raise CircuitError(f"gate {i}: wires must point backwards")

    @property
    def output_index(self) -> int:
        return len(self.gates) - 1

    def dump(self, levels: list[int] | None = None) -> str:
        """Plain-text gate/wire/level listing for protocol traces."""
        lines = []
        for i, (gate, inputs) in enumerate(zip(self.gates, self.wires)):
            owner = f" owner={gate.owner.value}" if gate.owner else ""
            key = f" key={gate.var_key!r}" if gate.var_key is not None else ""
            lvl = f" level={levels[i]}" if levels else ""
            lines.append(f"{i}: {gate.kind.value}{owner}{key} wires={inputs}{lvl}")
        return "\n".join(lines)


class CircuitBuilder:
    """Incremental construction; returns gate indices for wiring."""

    def __init__(self):
        self._gates: list[Gate] = []
        self._wires: list[tuple[int, ...]] = []

    def input(self, owner: Party, var_key) -> int:
        self._gates.append(Gate(GateKind.INPUT, owner=owner, var_key=var_key))
        self._wires.append(())
        return len(self._gates) - 1

    def add(self, a: int, b: int) -> int:
        self._gates.append(Gate(GateKind.ADD))
        self._wires.append((a, b))
        return len(self._gates) - 1

    def mul(self, a: int, b: int) -> int:
        self._gates.append(Gate(GateKind.MUL))
        self._wires.append((a, b))
        return len(self._gates) - 1

    def sum_of(self, indices: list[int]) -> int:
        """Balanced binary add tree over two or more gates."""
        nodes = list(indices)
        if not nodes:
            raise CircuitError("cannot sum zero gates")
        while len(nodes) > 1:
            nxt = []
            for i in range(0, len(nodes) - 1, 2):
                nxt.append(self.add(nodes[i], nodes[i + 1]))
            if len(nodes) % 2:
                nxt.append(nodes[-1])
            nodes = nxt
        return nodes[0]

    def build(self) -> Circuit:
        return Circuit(tuple(self._gates), tuple(self._wires))


def eval_plaintext(circuit: Circuit, assignments: dict) -> float:
    """Exact real-arithmetic evaluation; ground truth for the secure path."""
    values: list[float] = []
    for gate, inputs in zip(circuit.gates, circuit.wires):
        if gate.kind == GateKind.INPUT:
            if gate.var_key not in assignments:
                raise MissingAssignmentError(gate.var_key)
            values.append(float(assignments[gate.var_key]))
        elif gate.kind == GateKind.LOCAL:
            values.append(float(gate.expr(assignments)))
        elif gate.kind == GateKind.ADD:
            values.append(values[inputs[0]] + values[inputs[1]])
        else:
            values.append(values[inputs[0]] * values[inputs[1]])
    return values[-1]


def _subtree_expr(circuit: Circuit, root: int) -> Callable[[dict], float]:
    # Capture the original gates so deletions cannot invalidate the closure.
    gates, wires = circuit.gates, circuit.wires

    def evaluate(assignments: dict) -> float:
        cache: dict[int, float] = {}
        order = []
        stack = [root]
        while stack:
            idx = stack.pop()
            order.append(idx)
            stack.extend(wires[idx])
        for idx in reversed(order):
            gate = gates[idx]
            if gate.kind == GateKind.INPUT:
                if gate.var_key not in assignments:
                    raise MissingAssignmentError(gate.var_key)
                cache[idx] = float(assignments[gate.var_key])
            elif gate.kind == GateKind.LOCAL:
                cache[idx] = float(gate.expr(assignments))
            elif gate.kind == GateKind.ADD:
                cache[idx] = cache[wires[idx][0]] + cache[wires[idx][1]]
            else:
                cache[idx] = cache[wires[idx][0]] * cache[wires[idx][1]]
        return cache[root]

    return evaluate


def local_compute(circuit: Circuit) -> Circuit:
    """Collapse single-party subtrees into local gates and drop dead gates.

    A gate whose transitive inputs all belong to one party becomes a local
    leaf owned by that party; gates consumed only by such subtrees are
    deleted and the remaining wires renumbered.  Plaintext evaluation is
    preserved.  The output gate always survives.
    """
    n = len(circuit.gates)
    owner_of: list[Party | None] = [None] * n
    new_gates = list(circuit.gates)

    for i, gate in enumerate(circuit.gates):
        if gate.kind in (GateKind.INPUT, GateKind.LOCAL):
            owner_of[i] = gate.owner
        else:
            owners = {owner_of[j] for j in circuit.wires[i]}
            if len(owners) == 1 and None not in owners:
                owner = owners.pop()
                owner_of[i] = owner
                new_gates[i] = Gate(
                    GateKind.LOCAL, owner=owner, expr=_subtree_expr(circuit, i)
                )

    parents: list[list[int]] = [[] for _ in range(n)]
    for i, inputs in enumerate(circuit.wires):
        for j in inputs:
            parents[j].append(i)

    keep = []
    for i in range(n):
        if i == n - 1:
            keep.append(i)  # the output gate is never dead
        elif parents[i] and all(owner_of[p] is not None for p in parents[i]):
            continue  # value lives inside its consumers' local closures
        elif not parents[i]:
            continue  # dangling non-output gate
        else:
            keep.append(i)

    remap = {old: new for new, old in enumerate(keep)}
    kept_gates = []
    kept_wires = []
    for old in keep:
        kept_gates.append(new_gates[old])
        if owner_of[old] is not None:
            kept_wires.append(())  # single-party gates are leaves now
        else:
            kept_wires.append(tuple(remap[j] for j in circuit.wires[old]))
    return Circuit(tuple(kept_gates), tuple(kept_wires))


def compute_levels(circuit: Circuit) -> list[int]:
    """Scale-factor count per gate: leaves 1, add takes max, mul sums."""
    levels: list[int] = []
    for gate, inputs in zip(circuit.gates, circuit.wires):
        if gate.kind in (GateKind.INPUT, GateKind.LOCAL):
            levels.append(1)
        elif gate.kind == GateKind.ADD:
            levels.append(max(levels[j] for j in inputs))
        else:
            levels.append(sum(levels[j] for j in inputs))
    return levels


def ensure_level_fits(level: int, scale: int, modulus: int, value_bound) -> None:
    """Refuse circuits whose result would wrap the ring.

    A level-``level`` result of magnitude up to ``value_bound`` occupies
    ``value_bound * scale**level``; the ring must span twice that for signs.
    """
    bound = Fraction(value_bound) if not isinstance(value_bound, int) else value_bound
    if 2 * bound * scale**level >= modulus:
        raise LevelBoundError(
            f"level-{level} values up to {value_bound} do not fit the modulus"
        )
