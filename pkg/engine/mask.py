"""
Element-wise pruning masks. A mask shares the flat layout of the weight
vector; the network that actually runs is ``W * mask``.
"""

from typing import Iterable, Union

import numpy as np

from errors import MaskError


class Mask:
    """Immutable {0,1}^d vector with a cached float32 view for multiplication."""

    __slots__ = ("bits", "values")

    def __init__(self, bits: Union[np.ndarray, Iterable[int]]):
        array = np.array(bits, dtype=bool).reshape(-1)
        array.setflags(write=False)
        values = array.astype(np.float32)
        values.setflags(write=False)
        object.__setattr__(self, "bits", array)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("Mask is immutable")

    @classmethod
    def ones(cls, d: int) -> "Mask":
        return cls(np.ones(d, dtype=bool))

    @classmethod
    def zeros(cls, d: int) -> "Mask":
        return cls(np.zeros(d, dtype=bool))

    @property
    def d(self) -> int:
        return int(self.bits.size)

    @property
    def surviving(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __len__(self) -> int:
        return self.d

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(np.packbits(self.bits).tobytes())

    def __le__(self, other: "Mask") -> bool:
        """Elementwise nesting: every surviving bit of self survives in other."""
        check_same_length(self, other.d)
        return not np.any(self.bits & ~other.bits)

    def __repr__(self) -> str:
        return f"Mask(d={self.d}, surviving={self.surviving})"

    def as_dtype(self, dtype) -> np.ndarray:
        if np.dtype(dtype) == np.float32:
            return self.values
        return self.bits.astype(dtype)


def check_same_length(mask: Mask, d: int) -> None:
    if mask.d != d:
        raise MaskError(f"Mask has {mask.d} entries but the network has {d} parameters.")
