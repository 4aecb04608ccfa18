"""Balanced base-(2**(S+1) - 1) signed-digit encoding of quantized activations.

With scale factor S every digit lies in [-(2**S - 1), 2**S - 1] and is
realised by 2*S fixed resistors: S in the positive column storing
1, 2, ..., 2**(S-1) and their negatives in the negative column. Digits are
stored most-significant first, the order in which the crossbar consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EncodingError, RangeError, SchemaError

MAX_SCALE_FACTOR = 7


def _check_scale(S: int) -> None:
    if not isinstance(S, (int, np.integer)) or not 1 <= S <= MAX_SCALE_FACTOR:
        raise SchemaError(f"scale factor S must be an integer in [1, {MAX_SCALE_FACTOR}], got {S!r}")


def base_for(S: int) -> int:
    _check_scale(S)
    return 2 ** (S + 1) - 1


def digits_required(bits: int, S: int) -> int:
    """Smallest digit count whose balanced range covers +-(2**(bits-1) - 1)."""
    if bits < 2:
        raise SchemaError(f"bits must be >= 2, got {bits}")
    base = base_for(S)
    need = 2 ** (bits - 1) - 1
    d = 1
    while (base ** d - 1) // 2 < need:
        d += 1
    return d


def scale_cycle_product(bits: int, S: int) -> int:
    return S * digits_required(bits, S)


@dataclass(frozen=True)
class EncodingScheme:
    scale_factor: int = 2
    bits: int = 8

    def __post_init__(self):
        _check_scale(self.scale_factor)
        if self.bits < 2:
            raise SchemaError(f"bits must be >= 2, got {self.bits}")

    @property
    def base(self) -> int:
        return 2 ** (self.scale_factor + 1) - 1

    @property
    def digit_bound(self) -> int:
        return 2 ** self.scale_factor - 1

    @property
    def n_digits(self) -> int:
        return digits_required(self.bits, self.scale_factor)

    @property
    def resistors_per_activation(self) -> int:
        return 2 * self.scale_factor

    @property
    def max_value(self) -> int:
        """Largest magnitude representable with ``n_digits`` digits."""
        return (self.base ** self.n_digits - 1) // 2


@dataclass(frozen=True)
class DigitCode:
    digits: tuple[int, ...]  # most significant first

    def __iter__(self):
        return iter(self.digits)

    def __len__(self):
        return len(self.digits)


def encode(value: int, scheme: EncodingScheme) -> DigitCode:
    value = int(value)
    if abs(value) > scheme.max_value:
        raise RangeError(f"{value} outside +-{scheme.max_value} for base {scheme.base} "
                         f"with {scheme.n_digits} digits")
    base, bound = scheme.base, scheme.digit_bound
    digits = []
    for _ in range(scheme.n_digits):
        d = (value + bound) % base - bound
        digits.append(d)
        value = (value - d) // base
    return DigitCode(tuple(reversed(digits)))


def decode(code, scheme: EncodingScheme) -> int:
    digits = tuple(code)
    bound = scheme.digit_bound
    acc = 0
    for d in digits:
        if not -bound <= d <= bound:
            raise EncodingError(f"digit {d} outside +-{bound} for base {scheme.base}")
        acc = acc * scheme.base + int(d)
    return acc


def encode_array(values: np.ndarray, scheme: EncodingScheme) -> np.ndarray:
    """Vectorised encode: an integer array of shape s becomes shape s + (n_digits,)."""
    v = np.asarray(values, dtype=np.int64)
    if v.size and int(np.max(np.abs(v))) > scheme.max_value:
        raise RangeError(f"values exceed +-{scheme.max_value} for base {scheme.base}")
    base, bound = scheme.base, scheme.digit_bound
    out = np.empty(v.shape + (scheme.n_digits,), dtype=np.int64)
    for k in range(scheme.n_digits - 1, -1, -1):
        d = np.mod(v + bound, base) - bound
        out[..., k] = d
        v = (v - d) // base
    return out


def decode_array(digits: np.ndarray, scheme: EncodingScheme) -> np.ndarray:
    digits = np.asarray(digits, dtype=np.int64)
    if digits.size and int(np.max(np.abs(digits))) > scheme.digit_bound:
        raise EncodingError(f"digit outside +-{scheme.digit_bound}")
    acc = np.zeros(digits.shape[:-1], dtype=np.int64)
    for k in range(digits.shape[-1]):
        acc = acc * scheme.base + digits[..., k]
    return acc


@dataclass(frozen=True)
class SwitchStates:
    """On/off state of the 2*S resistors encoding one digit.

    ``positive[i]`` / ``negative[i]`` switch the resistor storing +2**i / -2**i.
    """

    positive: tuple[bool, ...]
    negative: tuple[bool, ...]

    def value(self) -> int:
        pos = sum(1 << i for i, on in enumerate(self.positive) if on)
        neg = sum(1 << i for i, on in enumerate(self.negative) if on)
        return pos - neg

    def register_bits(self) -> tuple[int, ...]:
        """Control-register image: one column-select bit, then S magnitude bits."""
        select = 1 if any(self.negative) else 0
        mag = self.negative if select else self.positive
        return (select,) + tuple(int(b) for b in mag)


def digit_to_switch_states(d: int, S: int) -> SwitchStates:
    _check_scale(S)
    bound = 2 ** S - 1
    if not -bound <= d <= bound:
        raise EncodingError(f"digit {d} outside +-{bound}")
    mag = tuple(bool((abs(d) >> i) & 1) for i in range(S))
    off = (False,) * S
    return SwitchStates(positive=mag, negative=off) if d >= 0 else SwitchStates(positive=off, negative=mag)


def base_table(bits: int = 8, scale_factors=range(1, MAX_SCALE_FACTOR + 1)) -> list[dict]:
    """Rows of base value, digit count and scale-cycle product for each S."""
    return [{"scale_factor": S, "base": base_for(S), "digits": digits_required(bits, S),
             "scale_cycle_product": scale_cycle_product(bits, S)} for S in scale_factors]
