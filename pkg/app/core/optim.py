"""Adam with bias correction and piecewise-constant schedules."""
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from app.core.autodiff import Parameter
from app.core.errors import ConfigurationError, ShapeError
from app.schemas.training import ScheduleSegment


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update applied in place to ``params``; a missing gradient counts as zero."""
    if lr <= 0:
        raise ConfigurationError(f"Learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data -= update.astype(param.data.dtype, copy=False)
    return state


class Adam:
    """Owns the optimiser state for one named parameter set."""

    def __init__(self, params: Mapping[str, Parameter], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = {name: param.grad for name, param in self.params.items()}
        adam_step(self.params, grads, self.state, lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        tensors = {}
        for name in self.params:
            if name in self.state.m:
                tensors[f"{prefix}.m.{name}"] = self.state.m[name]
                tensors[f"{prefix}.v.{name}"] = self.state.v[name]
        return tensors

    def load_state_tensors(self, prefix: str, tensors: Mapping[str, np.ndarray], step: int) -> None:
        self.state = AdamState(step=step)
        for name in self.params:
            if f"{prefix}.m.{name}" in tensors:
                self.state.m[name] = tensors[f"{prefix}.m.{name}"]
                self.state.v[name] = tensors[f"{prefix}.v.{name}"]


_ENTRY = re.compile(r"^\s*(\d+(?:\.\d+)?)(%?)\s*:\s*([-+0-9.eE]+)\s*$")
_RAMP = re.compile(r"^\s*ramp\s*:\s*([-+0-9.eE]+)\s*:\s*([-+0-9.eE]+)\s*:\s*(\d+(?:\.\d+)?)(%?)\s*(?::\s*(\d+))?\s*$")


class Schedule:
    """Piecewise-constant value over optimisation steps."""

    def __init__(self, segments: list[ScheduleSegment]):
        if not segments:
            raise ConfigurationError("A schedule needs at least one segment")
        self.segments = sorted(segments, key=lambda segment: segment.start)
        if self.segments[0].start != 0:
            raise ConfigurationError("A schedule must start at step 0")

    def value_at(self, step: int) -> float:
        value = self.segments[0].value
        for segment in self.segments:
            if segment.start > step:
                break
            value = segment.value
        return value

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls([ScheduleSegment(start=0, value=value)])

    @classmethod
    def staircase_ramp(cls, start: float, end: float, until_step: int, pieces: int = 10) -> "Schedule":
        """Linear ramp from ``start`` to ``end`` approximated by ``pieces`` constant stairs."""
        if until_step <= 0:
            return cls.constant(end)
        pieces = max(1, min(pieces, until_step))
        segments = [
            ScheduleSegment(start=int(round(i * until_step / pieces)), value=start + (end - start) * i / pieces)
            for i in range(pieces)
        ]
        segments.append(ScheduleSegment(start=until_step, value=end))
        return cls(segments)

    @classmethod
    def parse(cls, text: str, total_steps: int) -> "Schedule":
        """Parse ``"0:1e-3, 60%:1e-4"`` or ``"ramp:0:1.5:50%[:pieces]"``.

        Starts followed by ``%`` are fractions of ``total_steps``.
        """
        ramp = _RAMP.match(text)
        if ramp:
            start, end, until, percent, pieces = ramp.groups()
            until_step = _resolve_step(until, percent, total_steps)
            return cls.staircase_ramp(float(start), float(end), until_step, int(pieces) if pieces else 10)
        segments = []
        for entry in text.split(","):
            match = _ENTRY.match(entry)
            if not match:
                raise ConfigurationError(f"Malformed schedule entry {entry!r} in {text!r}")
            start, percent, value = match.groups()
            try:
                segments.append(ScheduleSegment(start=_resolve_step(start, percent, total_steps), value=float(value)))
            except ValueError as e:
                raise ConfigurationError(f"Invalid schedule entry {entry!r}: {e}")
        return cls(segments)

    @classmethod
    def from_log(cls, path: Path, field_name: str) -> "Schedule":
        """Rebuild the schedule a training run followed from its line-delimited log."""
        segments: list[ScheduleSegment] = []
        with open(path, "r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                value = float(record[field_name])
                if not segments or segments[-1].value != value:
                    segments.append(ScheduleSegment(start=int(record["step"]), value=value))
        if segments:
            segments[0] = ScheduleSegment(start=0, value=segments[0].value)
        return cls(segments)

    def describe(self) -> str:
        return ", ".join(f"{segment.start}:{segment.value:g}" for segment in self.segments)


def _resolve_step(number: str, percent: str, total_steps: int) -> int:
    if percent:
        return int(round(float(number) / 100.0 * total_steps))
    if "." in number:
        raise ConfigurationError(f"Absolute schedule steps must be integers, got {number}")
    return int(number)
