#!/usr/bin/env python3
"""
Single-Qubit Statevector Simulator
H and RY gates, amplitude/angle embedding, shot sampling and parameter-shift gradients
for the hybrid classification head
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lab_errors import ParameterError, QuantumStateError, UsageError
from tensor_autodiff import Tensor, record_op, parameter

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-9
DEGENERATE_INPUT = 1e-12
PROBABILITY_FLOOR = 1e-7
SHIFT = math.pi / 2

_HADAMARD = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=np.complex128) / math.sqrt(2.0)


class GateKind(Enum):
    H = "h"
    RY = "ry"


@dataclass(frozen=True)
class Gate:
    kind: GateKind
    theta: float = 0.0

    def matrix(self) -> np.ndarray:
        if self.kind is GateKind.H:
            return _HADAMARD
        c, s = math.cos(self.theta / 2.0), math.sin(self.theta / 2.0)
        return np.array([[c, -s], [s, c]], dtype=np.complex128)


def hadamard() -> Gate:
    return Gate(GateKind.H)


def ry(theta: float) -> Gate:
    return Gate(GateKind.RY, float(theta))


@dataclass(frozen=True)
class Statevector:
    amp0: complex
    amp1: complex

    def norm_squared(self) -> float:
        return abs(self.amp0) ** 2 + abs(self.amp1) ** 2

    def probabilities(self) -> Tuple[float, float]:
        return abs(self.amp0) ** 2, abs(self.amp1) ** 2

    def as_array(self) -> np.ndarray:
        return np.array([self.amp0, self.amp1], dtype=np.complex128)


ZERO_STATE = Statevector(1.0 + 0.0j, 0.0 + 0.0j)


@dataclass(frozen=True)
class ShotResult:
    counts0: int
    counts1: int
    shots: int

    @property
    def frequency1(self) -> float:
        return self.counts1 / self.shots


def evolve(state: Statevector, gate: Gate) -> Statevector:
    """Apply one gate to a normalized state"""
    error = abs(state.norm_squared() - 1.0)
    if error > NORM_TOLERANCE:
        raise QuantumStateError(f"input state is not normalized (norm error {error:.3e})")
    amp0, amp1 = gate.matrix() @ state.as_array()
    return Statevector(complex(amp0), complex(amp1))


def run_circuit(gates: Sequence[Gate], state: Statevector = ZERO_STATE) -> Statevector:
    for gate in gates:
        state = evolve(state, gate)
    return state


def expectation_z(state: Statevector) -> float:
    p0, p1 = state.probabilities()
    return p0 - p1


def overlap(a: Statevector, b: Statevector) -> float:
    """|<a|b>|^2"""
    return abs(np.vdot(a.as_array(), b.as_array())) ** 2


def sample_shots(state: Statevector, shots: int, rng: np.random.Generator) -> ShotResult:
    """Binomial measurement record in the computational basis"""
    if int(shots) != shots or shots <= 0:
        raise ParameterError(f"shots must be a positive integer, got {shots}")
    shots = int(shots)
    p1 = min(max(state.probabilities()[1], 0.0), 1.0)
    counts1 = int(rng.binomial(shots, p1))
    return ShotResult(shots - counts1, counts1, shots)


def is_degenerate_pair(a: float, b: float) -> bool:
    return abs(a) < DEGENERATE_INPUT and abs(b) < DEGENERATE_INPUT


def amplitude_to_angle(a: float, b: float) -> float:
    """phi with RY(2·phi)|0> = (cos phi, sin phi), the normalized embedding of (a, b)"""
    if is_degenerate_pair(a, b):
        return 0.0
    return math.atan2(b, a)


# ---------------------------------------------------------------- hybrid head

class HeadMode(Enum):
    ANGLE = "angle"
    AMPLITUDE = "amplitude"


HEAD_ARITY = {HeadMode.ANGLE: 1, HeadMode.AMPLITUDE: 2}

_ANGLE_ALIASES = {"θ": "theta", "theta": "theta", "φ": "phi", "phi": "phi", "w": "w"}
_MODE_ANGLES = {HeadMode.ANGLE: ("theta",), HeadMode.AMPLITUDE: ("phi", "w")}
# RY(2·phi) embeds phi, so its gate angle moves twice as fast
_GATE_FACTOR = {"theta": 1.0, "phi": 2.0, "w": 1.0}


@dataclass
class QuantumHead:
    """Single-qubit classifier head; `weight` is the trainable rotation of amplitude mode"""

    mode: HeadMode = HeadMode.AMPLITUDE
    weight: Tensor = field(default_factory=lambda: parameter([0.0], name="head.w"))
    shots: int = 0
    seed: int = 0
    degenerate_inputs: int = 0

    def __post_init__(self):
        self.mode = HeadMode(self.mode)
        if int(self.shots) != self.shots or self.shots < 0:
            raise ParameterError(f"shots must be a non-negative integer, got {self.shots}")
        self.shots = int(self.shots)
        self._shot_rng = np.random.default_rng(self.seed)

    @property
    def arity(self) -> int:
        return HEAD_ARITY[self.mode]

    @property
    def w(self) -> float:
        return float(self.weight.data.reshape(-1)[0])

    def parameters(self) -> Dict[str, Tensor]:
        return {"head.w": self.weight} if self.mode is HeadMode.AMPLITUDE else {}

    def next_shot_seed(self) -> int:
        return int(self._shot_rng.integers(0, 2 ** 62))

    def circuit(self, angles: Dict[str, float]) -> List[Gate]:
        if self.mode is HeadMode.ANGLE:
            return [hadamard(), ry(angles["theta"])]
        return [ry(2.0 * angles["phi"]), ry(angles["w"])]

    def angles_for(self, values: Sequence[float]) -> Dict[str, float]:
        """Circuit angles for one row of classical inputs"""
        if len(values) != self.arity:
            raise UsageError(f"{self.mode.value} head takes {self.arity} input(s), got {len(values)}")
        if self.mode is HeadMode.ANGLE:
            return {"theta": float(values[0])}
        a, b = float(values[0]), float(values[1])
        if is_degenerate_pair(a, b):
            self.degenerate_inputs += 1
            logger.warning(f"⚠️ degenerate amplitude input ({a:.1e}, {b:.1e}) mapped to phi = 0")
        return {"phi": amplitude_to_angle(a, b), "w": self.w}


def evaluate_observable(head: QuantumHead, angles: Dict[str, float], observable: str = "p1",
                        shot_seed: Optional[int] = None) -> float:
    """<Z> or P1 of the head circuit, exact when shots = 0, shot frequencies otherwise"""
    if observable not in ("z", "p1"):
        raise UsageError(f"unknown observable '{observable}', expected z or p1")
    state = run_circuit(head.circuit(angles))
    if head.shots == 0:
        z = expectation_z(state)
        p1 = state.probabilities()[1]
    else:
        seed = head.next_shot_seed() if shot_seed is None else shot_seed
        record = sample_shots(state, head.shots, np.random.default_rng(seed))
        p1 = record.frequency1
        z = (record.counts0 - record.counts1) / record.shots
    return z if observable == "z" else p1


def param_shift_grad(head: QuantumHead, angle_name: str, at: Dict[str, float], observable: str = "p1",
                     shot_seed: Optional[int] = None) -> float:
    """[E(angle + pi/2) - E(angle - pi/2)] / 2 on the gate angle, chained back to `angle_name`"""
    name = _ANGLE_ALIASES.get(angle_name)
    if name is None or name not in _MODE_ANGLES[head.mode]:
        raise UsageError(f"unknown angle '{angle_name}' for {head.mode.value} head")
    if head.shots > 0 and shot_seed is None:
        shot_seed = head.next_shot_seed()

    factor = _GATE_FACTOR[name]
    plus, minus = dict(at), dict(at)
    plus[name] += SHIFT / factor
    minus[name] -= SHIFT / factor
    e_plus = evaluate_observable(head, plus, observable, shot_seed)
    e_minus = evaluate_observable(head, minus, observable, shot_seed)
    return factor * (e_plus - e_minus) / 2.0


def hybrid_head(inputs: Tensor, head: QuantumHead) -> Tensor:
    """
    Classical values from fc5 -> (logP0, logP1) per row.

    Gradients w.r.t. circuit angles use the parameter-shift rule; the amplitude pair (a, b)
    is reached through the atan2 chain rule dphi = (-b, a)/(a^2 + b^2).
    """
    single = inputs.ndim == 1
    rows = inputs.data.reshape(1, -1) if single else inputs.data
    if rows.ndim != 2 or rows.shape[1] != head.arity:
        raise UsageError(f"{head.mode.value} head takes {head.arity} input(s) per row, got shape {inputs.shape}")

    n = rows.shape[0]
    angles = [head.angles_for(row) for row in rows]
    seeds = [head.next_shot_seed() if head.shots > 0 else None for _ in range(n)]
    p1 = np.array([evaluate_observable(head, angles[i], "p1", seeds[i]) for i in range(n)])
    clamped = np.clip(p1, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    out = np.stack([np.log1p(-clamped), np.log(clamped)], axis=1)

    def backward(g: np.ndarray):
        g = g.reshape(n, 2)
        interior = (p1 > PROBABILITY_FLOOR) & (p1 < 1.0 - PROBABILITY_FLOOR)
        d_p1 = np.where(interior, g[:, 1] / clamped - g[:, 0] / (1.0 - clamped), 0.0)
        grad_rows = np.zeros_like(rows)
        grad_w = 0.0
        for i in range(n):
            if d_p1[i] == 0.0:
                continue
            if head.mode is HeadMode.ANGLE:
                grad_rows[i, 0] = d_p1[i] * param_shift_grad(head, "theta", angles[i], "p1", seeds[i])
                continue
            a, b = rows[i]
            if not is_degenerate_pair(a, b):
                d_phi = param_shift_grad(head, "phi", angles[i], "p1", seeds[i])
                radius2 = a * a + b * b
                grad_rows[i, 0] = d_p1[i] * d_phi * (-b / radius2)
                grad_rows[i, 1] = d_p1[i] * d_phi * (a / radius2)
            grad_w += d_p1[i] * param_shift_grad(head, "w", angles[i], "p1", seeds[i])
        grad_inputs = grad_rows.reshape(inputs.shape)
        if head.mode is HeadMode.AMPLITUDE:
            return grad_inputs, np.array([grad_w])
        return (grad_inputs,)

    inputs_tuple = (inputs, head.weight) if head.mode is HeadMode.AMPLITUDE else (inputs,)
    return record_op("hybrid_head", inputs_tuple, out[0] if single else out, backward)
