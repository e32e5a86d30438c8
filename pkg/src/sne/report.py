"""Decode quality as a function of the number of refinement steps K."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from sne.codec import QuantizedRepresentation
from sne.errors import ParameterError
from sne.estimator import SneConfig, StepCounter, decode_image
from sne.metrics import psnr


@dataclass
class KSweepReport:
    """One PSNR per K, all decoded from the same parameters.

    ``steps`` and ``seconds`` record the state-update count and wall time of
    each decode so the cost of larger K can be checked.
    """

    K_values: list[int]
    psnr: list[float]
    bpp: float
    patches: int = 0
    steps: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.K_values) != len(self.psnr):
            raise ParameterError("one PSNR value per K is required")
        if any(b <= a for a, b in zip(self.K_values, self.K_values[1:])):
            raise ParameterError(f"K values must be strictly increasing: {self.K_values}")

    def to_text(self) -> str:
        heads = [f"K = {k}" for k in self.K_values]
        vals = [f"{p:.4f}" for p in self.psnr]
        width = max(len(s) for s in heads + vals)
        label = 6
        lines = [
            f"PSNR (dB) by refinement steps at {self.bpp:.4f} bpp",
            " " * label + "  ".join(h.rjust(width) for h in heads),
            "PSNR".ljust(label) + "  ".join(v.rjust(width) for v in vals),
        ]
        return "\n".join(lines) + "\n"


def ksweep(rep: QuantizedRepresentation, params, config: SneConfig, K_values, reference) -> KSweepReport:
    K_values = [int(k) for k in K_values]
    if not K_values:
        raise ParameterError("K_values must not be empty")
    if min(K_values) < 1:
        raise ParameterError(f"K values must be >= 1: {K_values}")
    values, steps, seconds = [], [], []
    for K in K_values:
        counter = StepCounter()
        t0 = time.perf_counter()
        out = decode_image(rep, params, config, K, counter)
        seconds.append(time.perf_counter() - t0)
        steps.append(counter.steps)
        values.append(psnr(out, reference))
    patches = rep.grid_shape[0] * rep.grid_shape[1] * rep.channels
    return KSweepReport(K_values, values, rep.bpp_estimate, patches, steps, seconds)
