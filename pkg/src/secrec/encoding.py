"""Fixed-point encoding and plaintext slot packing.

Reals map to ring integers by scaling with ``S`` (a power of two) and keeping
the integer part; ``modulus - v`` represents ``-v``.  Every multiplication of
encoded values raises the power of ``S`` carried by the result (its *level*),
and nothing is re-rounded until the final decode divides it back out.

Packing places many ring values inside one big plaintext at radix ``P`` (the
slot size).  Signs inside slots use a separate slot modulus ``Q < P``, so a
slot is read by reducing it mod ``Q`` and then sign-decoding.  The slot size
is chosen from a bound on the largest value a slot can accumulate:

* exact mode:        ``P >= bound``          and ``slot_bits * slots <= key_bits``
* approximate mode:  ``S^(l-1) * P >= bound`` and the budget shrinks by
  ``(l-1) * log2(S)`` bits; slot contents then carry an additive error below
  ``S^(l-1)``, i.e. below ``1/S`` after decode.

Approximate mode requires ``Q | P`` so that the bits a slot overflows into
its neighbour are exact multiples of ``Q`` and vanish under the mod-``Q``
read-out.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


class EncodingOverflowError(ValueError):
    """Real value too large for the ring at this scale."""


class SlotOverflowError(ValueError):
    """A packed element does not fit in its slot."""


class CannotPackError(ValueError):
    """No slot layout fits: the slot size exceeds the plaintext budget."""


class DecodeOverflowError(ValueError):
    """Decoded magnitude is far outside the representable range."""


def _next_pow2_geq(x) -> int:
    """Smallest power of two >= x (x may be a Fraction or int, x > 0)."""
    frac = Fraction(x)
    if frac <= 0:
        raise ValueError("value must be positive")
    k = max(frac.numerator.bit_length() - frac.denominator.bit_length() - 1, 0)
    while (1 << k) * frac.denominator < frac.numerator:
        k += 1
    return 1 << k


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class EncodingParams:
    """Scale factor S and slot modulus Q, both powers of two, Q > 2S."""

    scale: int
    slot_modulus: int

    def __post_init__(self):
        if not _is_pow2(self.scale) or self.scale < 2:
            raise ValueError("scale must be a power of two >= 2")
        if not _is_pow2(self.slot_modulus):
            raise ValueError("slot modulus must be a power of two")
        if self.slot_modulus <= 2 * self.scale:
            raise ValueError("slot modulus must exceed 2 * scale")

    @property
    def precision_bits(self) -> int:
        return self.scale.bit_length() - 1


def encode(x: float, params: EncodingParams, modulus: int) -> int:
    """Fixed-point encode a real into ``[0, modulus)``.

    Rounds half to even; negative values map to ``modulus - |fixed|``.
    Rejects ``|x| >= modulus / (2S)`` so the sign bit stays unambiguous.
    """
    fixed = round(abs(x) * params.scale)
    if 2 * fixed >= modulus:
        raise EncodingOverflowError(f"|{x}| >= modulus / (2 * scale)")
    if x < 0:
        return (modulus - fixed) % modulus
    return fixed


def decode(v: int, params: EncodingParams, modulus: int, level: int = 1) -> float:
    """Inverse of :func:`encode` for a value carrying ``level`` scale factors."""
    if not 0 <= v < modulus:
        raise ValueError("value out of ring range")
    if 2 * v < modulus:
        magnitude, sign = v, 1.0
    else:
        magnitude, sign = modulus - v, -1.0
    excess = magnitude.bit_length() - level * params.precision_bits
    if excess > 1000:
        raise DecodeOverflowError("magnitude exceeds the representable range")
    return sign * magnitude / params.scale**level


@dataclass(frozen=True)
class PolynomialBound:
    """Upper bound on a fixed-point polynomial evaluated at all-Q inputs.

    ``terms`` is a sequence of ``(count, q_degree, s_degree)`` triples;
    the bound is ``sum(count * Q**q_degree * S**s_degree)``.
    """

    terms: tuple[tuple[int, int, int], ...]
    scale: int

    def value(self, slot_modulus: int) -> int:
        total = 0
        for count, q_deg, s_deg in self.terms:
            total += count * slot_modulus**q_deg * self.scale**s_deg
        if total <= 0:
            raise ValueError("bound must be positive")
        return total

    @property
    def degree(self) -> int:
        return max(q + s for _, q, s in self.terms)


@dataclass(frozen=True)
class PackingLayout:
    """How values are laid out inside one plaintext.

    ``mode`` is ``"exact"`` or ``"approximate"``; ``level`` is the power of
    the scale carried by slot contents when they are read out.
    """

    slot_size: int
    slot_modulus: int
    scale: int
    slot_count: int
    mode: str
    level: int

    def __post_init__(self):
        if self.mode not in ("exact", "approximate"):
            raise ValueError("mode must be 'exact' or 'approximate'")
        if not _is_pow2(self.slot_size) or not _is_pow2(self.slot_modulus):
            raise ValueError("slot size and slot modulus must be powers of two")
        if self.slot_size % self.slot_modulus != 0:
            raise ValueError("slot modulus must divide the slot size")
        if self.slot_count < 1:
            raise CannotPackError("layout has no usable slots")
        if self.level < 1:
            raise ValueError("level must be >= 1")

    @property
    def slot_bits(self) -> int:
        return self.slot_size.bit_length() - 1

    def chunks(self, length: int) -> int:
        """Number of plaintexts needed to hold ``length`` values."""
        return -(-length // self.slot_count)

    def describe(self) -> str:
        return (
            f"P=2^{self.slot_bits} Q=2^{self.slot_modulus.bit_length() - 1} "
            f"S=2^{self.scale.bit_length() - 1} slots={self.slot_count} "
            f"mode={self.mode} level={self.level}"
        )


def slot_modulus(scale: int, degree: int, value_bound) -> int:
    """Smallest power-of-two modulus holding degree-``degree`` results.

    A result of magnitude below ``value_bound`` carries ``degree`` scale
    factors, so the ring must span ``2 * S**degree * value_bound`` to keep
    positive and negative halves apart; never below ``2 * scale``.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if value_bound <= 0:
        raise ValueError("value bound must be positive")
    target = 2 * scale**degree * Fraction(value_bound)
    return max(_next_pow2_geq(target), 2 * scale)


def exact_slot_size(bound: PolynomialBound, slot_mod: int, limb_bits: int = 1) -> int:
    """Smallest power-of-two slot size covering the worst slot value.

    ``limb_bits > 1`` rounds the slot width up to a multiple of that many
    bits so unpacking lands on limb boundaries (32 for 2048-bit plaintexts).
    """
    p = _next_pow2_geq(bound.value(slot_mod))
    return _align_slot(max(p, slot_mod), limb_bits)


def approx_slot_size(
    bound: PolynomialBound, slot_mod: int, scale: int, level: int, limb_bits: int = 1
) -> int:
    """Slot size when an additive slot error below ``scale**(level-1)`` is fine."""
    if level < 1:
        raise ValueError("level must be >= 1")
    target = Fraction(bound.value(slot_mod), scale ** (level - 1))
    p = _next_pow2_geq(target)
    return _align_slot(max(p, slot_mod), limb_bits)


def _align_slot(p: int, limb_bits: int) -> int:
    if limb_bits <= 1:
        return p
    bits = p.bit_length() - 1
    return 1 << -(-bits // limb_bits) * limb_bits


def build_layout(
    slot_size: int,
    slot_mod: int,
    scale: int,
    key_bits: int,
    mode: str = "exact",
    level: int = 1,
) -> PackingLayout:
    """Fit as many slots as the plaintext bit budget allows.

    Approximate mode reserves ``(level-1) * log2(S)`` bits of headroom for
    the error carried above the top slot.
    """
    slot_bits = slot_size.bit_length() - 1
    budget = key_bits
    if mode == "approximate":
        budget -= (level - 1) * (scale.bit_length() - 1)
    count = budget // slot_bits
    if count < 1:
        raise CannotPackError(
            f"slot of 2^{slot_bits} does not fit a {key_bits}-bit plaintext"
        )
    return PackingLayout(slot_size, slot_mod, scale, count, mode, level)


def pack(values, layout: PackingLayout) -> int:
    """Radix-P packing: ``sum(v_i * P**i)``, low slot first."""
    values = list(values)
    if len(values) > layout.slot_count:
        raise SlotOverflowError(
            f"{len(values)} values exceed {layout.slot_count} slots"
        )
    packed = 0
    for v in reversed(values):
        if not 0 <= v < layout.slot_size:
            raise SlotOverflowError(f"value {v} outside [0, slot size)")
        packed = packed * layout.slot_size + v
    return packed


def unpack_raw(packed: int, layout: PackingLayout) -> list[int]:
    """Slot contents as raw integers in ``[0, P)``, no mod-Q read-out."""
    if packed < 0:
        raise ValueError("packed value must be non-negative")
    out = []
    for _ in range(layout.slot_count):
        out.append(packed % layout.slot_size)
        packed //= layout.slot_size
    return out


def unpack(packed: int, layout: PackingLayout) -> list[int]:
    """Read slots back out.

    Exact mode returns the raw slot contents.  Approximate mode reduces each
    slot mod Q and zeroes the bits below ``S**(level-1)``, which carry the
    tolerated packing error rather than payload.
    """
    slots = unpack_raw(packed, layout)
    if layout.mode == "exact":
        return slots
    error_bits = (layout.level - 1) * (layout.scale.bit_length() - 1)
    return [(s % layout.slot_modulus) >> error_bits << error_bits for s in slots]


def parse_layout(text: str) -> PackingLayout:
    """Inverse of :meth:`PackingLayout.describe`."""
    fields = dict(item.split("=", 1) for item in text.split())
    powers = {
        key: 1 << int(fields[key][2:]) for key in ("P", "Q", "S")
    }
    return PackingLayout(
        powers["P"],
        powers["Q"],
        powers["S"],
        int(fields["slots"]),
        fields["mode"],
        int(fields["level"]),
    )
