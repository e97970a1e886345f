"""Fixed-length copyright payloads and the bitwise BCE message loss."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from gsmark.validation import InvalidParameterError, as_generator

N_BITS = 48
PROB_CLAMP = 1e-6


@dataclass(frozen=True, eq=False)
class Message:
    """A 48-bit message; bit 0 is the most significant bit of the hex form."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.shape != (N_BITS,) or not np.isin(bits, (0, 1)).all():
            raise InvalidParameterError(f"message must be {N_BITS} bits of 0/1")
        bits = bits.astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other):
        return isinstance(other, Message) and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash(self.to_hex())

    @classmethod
    def random(cls, seed=None) -> "Message":
        return cls(as_generator(seed).integers(0, 2, N_BITS))

    @classmethod
    def from_hex(cls, text: str) -> "Message":
        text = text.strip().lower().removeprefix("0x")
        if len(text) != N_BITS // 4:
            raise InvalidParameterError(f"hex message must have {N_BITS // 4} characters")
        try:
            value = int(text, 16)
        except ValueError as exc:
            raise InvalidParameterError(f"invalid hex message {text!r}") from exc
        return cls(np.array([(value >> (N_BITS - 1 - i)) & 1 for i in range(N_BITS)]))

    @classmethod
    def from_bitstring(cls, text: str) -> "Message":
        text = text.strip()
        if len(text) != N_BITS or set(text) - {"0", "1"}:
            raise InvalidParameterError(f"bitstring must have {N_BITS} characters of 0/1")
        return cls(np.array([int(c) for c in text]))

    @classmethod
    def parse(cls, text: str) -> "Message":
        text = text.strip()
        return cls.from_bitstring(text) if len(text) == N_BITS else cls.from_hex(text)

    @classmethod
    def load(cls, path) -> "Message":
        return cls.parse(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_hex() + "\n")

    def to_hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | int(b)
        return f"{value:0{N_BITS // 4}x}"

    def to_bitstring(self) -> str:
        return "".join(str(int(b)) for b in self.bits)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.bits.astype(np.float32), dtype=dtype)


def message_loss(p, m) -> torch.Tensor | float:
    """Mean binary cross-entropy between probabilities ``p`` and bits ``m``.

    Accepts tensors (differentiable, returns a tensor) or array-likes
    (returns a float). Probabilities are clamped to ``[1e-6, 1 - 1e-6]``.
    """
    if isinstance(m, Message):
        m = m.bits
    if isinstance(p, torch.Tensor):
        m = torch.as_tensor(np.asarray(m, dtype=np.float64) if not isinstance(m, torch.Tensor) else m,
                            dtype=p.dtype)
        p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
        return -(m * torch.log(p) + (1 - m) * torch.log(1 - p)).mean()
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    m = np.asarray(m, dtype=np.float64)
    return float(-(m * np.log(p) + (1 - m) * np.log(1 - p)).mean())
