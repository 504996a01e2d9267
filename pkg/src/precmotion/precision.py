"""Per-tensor precision assignments and the quantize-dequantize hooks."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .fpcodec import FP32, FpFormat, parse_format, quantize_tensor

SLOTS = ("out_spheres", "grad_out_spheres", "out_vec", "closest_pt", "closest_pt_swept")


@dataclass(frozen=True)
class PrecisionConfig:
    out_spheres: FpFormat = FP32
    grad_out_spheres: FpFormat = FP32
    out_vec: FpFormat = FP32
    closest_pt: FpFormat = FP32
    closest_pt_swept: FpFormat = FP32

    @classmethod
    def uniform(cls, fmt: FpFormat | str) -> PrecisionConfig:
        fmt = parse_format(fmt)
        return cls(*([fmt] * len(SLOTS)))

    @classmethod
    def from_formats(cls, formats) -> PrecisionConfig:
        return cls(*(parse_format(f) for f in formats))

    @classmethod
    def from_dict(cls, data: dict) -> PrecisionConfig:
        return cls(**{slot: parse_format(data.get(slot, FP32)) for slot in SLOTS})

    def formats(self) -> tuple[FpFormat, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def replace(self, slot: str, fmt: FpFormat) -> PrecisionConfig:
        data = {s: getattr(self, s) for s in SLOTS}
        data[slot] = fmt
        return PrecisionConfig(**data)

    def to_dict(self) -> dict[str, str]:
        return {slot: getattr(self, slot).name for slot in SLOTS}

    def bits(self) -> tuple[int, ...]:
        return tuple(f.total_bits for f in self.formats())

    @property
    def total_bits(self) -> int:
        return sum(self.bits())

    def key(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.formats())

    def __str__(self) -> str:
        return "(" + ", ".join(self.key()) + ")"


def total_bits(config: PrecisionConfig) -> int:
    return config.total_bits


class SlotStats:
    """Running zero/element counts per slot, for sparsity reporting."""

    def __init__(self):
        self.zeros = dict.fromkeys(SLOTS, 0)
        self.elements = dict.fromkeys(SLOTS, 0)

    def add(self, slot: str, values: np.ndarray) -> None:
        self.zeros[slot] += int(values.size - np.count_nonzero(values))
        self.elements[slot] += int(values.size)

    def merge(self, other: SlotStats) -> None:
        for slot in SLOTS:
            self.zeros[slot] += other.zeros[slot]
            self.elements[slot] += other.elements[slot]

    def sparsity(self) -> dict[str, float]:
        return {
            slot: (self.zeros[slot] / self.elements[slot] if self.elements[slot] else 1.0)
            for slot in SLOTS
        }


class Hooks:
    """Applies a PrecisionConfig at the five tensor boundaries.

    Identity formats (E8M23) are skipped, so an all-FP32 config leaves every
    tensor untouched whatever its dtype.
    """

    def __init__(self, config: PrecisionConfig | None = None, stats: SlotStats | None = None):
        self.config = config or PrecisionConfig()
        self.stats = stats
        self._active = {
            slot: fmt for slot, fmt in zip(SLOTS, self.config.formats()) if not fmt.is_identity
        }

    def __call__(self, slot: str, values: np.ndarray) -> np.ndarray:
        fmt = self._active.get(slot)
        if fmt is not None:
            quantize_tensor(values, fmt)
        if self.stats is not None:
            self.stats.add(slot, values)
        return values


NO_HOOKS = Hooks()
