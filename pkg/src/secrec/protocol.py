"""Two-party secure computation over Paillier ciphertexts.

One session pairs the key holder (who can decrypt) with the evaluator (who
holds only the public key and does all homomorphic work).  Two rules keep
intermediates private: the key holder only ever sees masked values, and the
evaluator only ever sees ciphertexts.  Every ciphertext the key holder sends
is fresh or re-randomized, so the evaluator cannot link it to anything it
sent.

The session runs both parties in one process for determinism, but all
cross-party data passes through the framed channel, so byte meters and
transcripts reflect exactly what a networked deployment would send.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

from . import paillier
from .circuit import Circuit, GateKind, Party
from .encoding import EncodingParams, PackingLayout, decode, encode, pack, unpack_raw
from .paillier import Ciphertext, PublicKey, SecretKey
from .transport import (
    A_TO_B,
    B_TO_A,
    CIPHER,
    CIPHER_BATCH,
    PLAIN,
    Channel,
    Frame,
    LoopbackChannel,
    decode_plain_int,
    encode_plain_int,
)

# Minimum bit gap between the slot size and the per-slot value bound when the
# key holder gets masked slot values; keeps the mask statistically hiding.
MASK_MARGIN_BITS = 40


class ProtocolError(RuntimeError):
    """Missing variables, wrong operand case, or a broken session contract."""


class LevelError(ProtocolError):
    """Operand levels are inconsistent with the requested operation."""


class MaskMarginError(ProtocolError):
    """Slot masks would not statistically hide the masked values."""


class OperandCase(Enum):
    AB = "AB"  # one key-holder input, one evaluator input
    IA = "IA"  # intermediate with a key-holder input
    IB = "IB"  # intermediate with an evaluator input
    II = "II"  # two intermediates


class RevealMode(Enum):
    TO_KEY_HOLDER = "A"
    TO_EVALUATOR = "B"
    TO_BOTH = "AB"


@dataclass(frozen=True)
class StoredCipher:
    ct: Ciphertext


@dataclass(frozen=True)
class StoredPacked:
    ct: Ciphertext
    layout: PackingLayout
    keys: tuple
    level: int
    # Per-slot masks still riding on the contents, if any (evaluator-known).
    masks: tuple | None = None


@dataclass
class MaskRecord:
    purpose: str
    modulus: int
    value: int
    uses: int = 0


class ProtocolSession:
    """Shared state of one key-holder / evaluator pair."""

    def __init__(
        self,
        public_key: PublicKey,
        secret_key: SecretKey,
        encoding: EncodingParams,
        channel: Channel | None = None,
        rng_key_holder=None,
        rng_evaluator=None,
    ):
        self.pk = public_key
        self.sk = secret_key
        self.encoding = encoding
        self.channel = channel if channel is not None else LoopbackChannel()
        self.rng_a = rng_key_holder or paillier._default_rng
        self.rng_b = rng_evaluator or paillier._default_rng
        self.workers = 1  # worker processes for key-holder batch encryption
        self.store_a: dict = {}  # key holder: plain fixed-point ints
        self.store_b: dict = {}  # evaluator: plain ints / StoredCipher / StoredPacked
        self.mask_ledger: list[MaskRecord] = []
        self.packed_index: dict = {}  # value key -> (store key, slot)

    # -- party-local primitives ------------------------------------------

    @property
    def n(self) -> int:
        return self.pk.n

    @property
    def scale(self) -> int:
        return self.encoding.scale

    def encrypt_at_a(self, x: int) -> Ciphertext:
        return paillier.encrypt(self.pk, x % self.n, self.rng_a)

    def encrypt_many_at_a(self, values) -> list[Ciphertext]:
        return paillier.batch_encrypt(self.pk, [v % self.n for v in values],
                                      self.rng_a, self.workers)

    def encrypt_at_b(self, x: int) -> Ciphertext:
        return paillier.encrypt(self.pk, x % self.n, self.rng_b)

    def decrypt_at_a(self, ct: Ciphertext) -> int:
        return paillier.decrypt(self.sk, ct)

    def hom_add(self, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
        return paillier.hom_add(self.pk, c1, c2)

    def ct_mul(self, ct: Ciphertext, k: int) -> Ciphertext:
        return paillier.ct_pt_mul(self.pk, ct, k % self.n)

    def new_mask(self, modulus: int, purpose: str) -> MaskRecord:
        record = MaskRecord(purpose, modulus, self.rng_b.randrange(modulus))
        self.mask_ledger.append(record)
        return record

    def consume_mask(self, record: MaskRecord) -> int:
        record.uses += 1
        if record.uses > 1:
            raise ProtocolError(f"mask reuse detected ({record.purpose})")
        return record.value

    # -- wire helpers ------------------------------------------------------

    def send_cipher(self, direction: str, ct: Ciphertext, tag: str) -> Ciphertext:
        frame = Frame(CIPHER, ct.to_bytes())
        self.channel.send(direction, frame, tag=tag, ciphertexts=1)
        received = self.channel.recv(direction)
        return Ciphertext.from_bytes(received.payload, self.pk)

    def send_cipher_batch(self, direction: str, cts: list[Ciphertext],
                          tag: str) -> list[Ciphertext]:
        if len(cts) == 1:
            return [self.send_cipher(direction, cts[0], tag)]
        payload = struct.pack(">I", len(cts)) + b"".join(c.to_bytes() for c in cts)
        self.channel.send(direction, Frame(CIPHER_BATCH, payload), tag=tag,
                          ciphertexts=len(cts))
        received = self.channel.recv(direction)
        (count,) = struct.unpack(">I", received.payload[:4])
        width = self.pk.ciphertext_bytes
        body = received.payload[4:]
        return [
            Ciphertext.from_bytes(body[i * width : (i + 1) * width], self.pk)
            for i in range(count)
        ]

    def send_plain(self, direction: str, value: int, tag: str) -> int:
        frame = Frame(PLAIN, encode_plain_int(value))
        self.channel.send(direction, frame, tag=tag, plaintexts=1)
        return decode_plain_int(self.channel.recv(direction).payload)

    # -- variable stores ---------------------------------------------------

    def put_plain_a(self, key, value: int) -> None:
        self.store_a[key] = value % self.n

    def put_plain_b(self, key, value: int) -> None:
        self.store_b[key] = value % self.n

    def put_cipher_b(self, key, ct: Ciphertext) -> None:
        self.store_b[key] = StoredCipher(ct)

    def register_packed(self, key, ct: Ciphertext, layout: PackingLayout,
                        value_keys, level: int, masks=None) -> None:
        """Store a packed ciphertext at the evaluator and index its slots."""
        var = StoredPacked(ct, layout, tuple(value_keys), level,
                           tuple(masks) if masks is not None else None)
        self.store_b[key] = var
        for slot, value_key in enumerate(var.keys):
            self.packed_index[value_key] = (key, slot)

    def _get_plain_a(self, key) -> int:
        if key not in self.store_a:
            raise ProtocolError(f"key holder has no variable {key!r}")
        return self.store_a[key]

    def _get_plain_b(self, key) -> int:
        value = self.store_b.get(key)
        if not isinstance(value, int):
            raise ProtocolError(f"evaluator has no plain variable {key!r}")
        return value

    def _get_cipher_b(self, key) -> Ciphertext:
        value = self.store_b.get(key)
        if not isinstance(value, StoredCipher):
            raise ProtocolError(f"evaluator has no intermediate {key!r}")
        return value.ct


def _aligned(value: int, delta: int, session: ProtocolSession) -> int:
    return value * session.scale**delta % session.n if delta else value


def _aligned_ct(ct: Ciphertext, delta: int, session: ProtocolSession) -> Ciphertext:
    return session.ct_mul(ct, session.scale**delta) if delta else ct


def secure_add(session: ProtocolSession, case: OperandCase, i1, i2, j,
               level1: int, level2: int, op_level: int) -> None:
    """Add two variables; the sum lands encrypted at the evaluator.

    The lower-level operand is multiplied by powers of the scale until both
    carry ``op_level`` scale factors.
    """
    if op_level < max(level1, level2):
        raise LevelError("op level below an operand level")
    d1, d2 = op_level - level1, op_level - level2

    if case == OperandCase.AB:
        v1 = _aligned(session._get_plain_a(i1), d1, session)
        v2 = _aligned(session._get_plain_b(i2), d2, session)
        c1 = session.send_cipher(A_TO_B, session.encrypt_at_a(v1), "input_share")
        session.put_cipher_b(j, session.hom_add(c1, session.encrypt_at_b(v2)))
    elif case == OperandCase.IA:
        c1 = _aligned_ct(session._get_cipher_b(i1), d1, session)
        v2 = _aligned(session._get_plain_a(i2), d2, session)
        c2 = session.send_cipher(A_TO_B, session.encrypt_at_a(v2), "input_share")
        session.put_cipher_b(j, session.hom_add(c1, c2))
    elif case == OperandCase.IB:
        c1 = _aligned_ct(session._get_cipher_b(i1), d1, session)
        v2 = _aligned(session._get_plain_b(i2), d2, session)
        session.put_cipher_b(j, session.hom_add(c1, session.encrypt_at_b(v2)))
    elif case == OperandCase.II:
        c1 = _aligned_ct(session._get_cipher_b(i1), d1, session)
        c2 = _aligned_ct(session._get_cipher_b(i2), d2, session)
        session.put_cipher_b(j, session.hom_add(c1, c2))
    else:
        raise ProtocolError(f"unknown case {case}")


def secure_mul(session: ProtocolSession, case: OperandCase, i1, i2, j,
               level1: int, level2: int, op_level: int) -> None:
    """Multiply two variables; the product lands encrypted at the evaluator.

    Cases with a key-holder operand or two intermediates use additive
    blinding: the evaluator masks what the key holder will see, and corrects
    the returned ciphertext homomorphically.
    """
    if op_level != level1 + level2:
        raise LevelError("multiplication output level must be the level sum")

    if case == OperandCase.AB:
        v1 = session._get_plain_a(i1)
        v2 = session._get_plain_b(i2)
        c1 = session.send_cipher(A_TO_B, session.encrypt_at_a(v1), "input_share")
        session.put_cipher_b(j, session.ct_mul(c1, v2))
    elif case == OperandCase.IA:
        c1 = session._get_cipher_b(i1)
        v2 = session._get_plain_a(i2)
        r = session.new_mask(session.n, "mul_blind")
        masked = session.hom_add(
            c1, session.encrypt_at_b(session.n - r.value))
        masked = session.send_cipher(B_TO_A, masked, "masked_intermediate")
        # Key holder multiplies the blinded ciphertext by its own input and
        # returns it re-randomized, along with a fresh encryption of the
        # input for the correction term.
        c3 = paillier.rerandomize(session.pk, session.ct_mul(masked, v2),
                                  session.rng_a)
        c3 = session.send_cipher(A_TO_B, c3, "blinded_product")
        c2 = session.send_cipher(A_TO_B, session.encrypt_at_a(v2), "input_share")
        correction = session.ct_mul(c2, session.consume_mask(r))
        session.put_cipher_b(j, session.hom_add(c3, correction))
    elif case == OperandCase.IB:
        c1 = session._get_cipher_b(i1)
        v2 = session._get_plain_b(i2)
        session.put_cipher_b(j, session.ct_mul(c1, v2))
    elif case == OperandCase.II:
        c1 = session._get_cipher_b(i1)
        c2 = session._get_cipher_b(i2)
        r1 = session.new_mask(session.n, "mul_blind")
        r2 = session.new_mask(session.n, "mul_blind")
        m1 = session.hom_add(c1, session.encrypt_at_b(r1.value))
        m2 = session.hom_add(c2, session.encrypt_at_b(r2.value))
        m1 = session.send_cipher(B_TO_A, m1, "masked_intermediate")
        m2 = session.send_cipher(B_TO_A, m2, "masked_intermediate")
        v1_blinded = session.decrypt_at_a(m1)
        c3 = paillier.rerandomize(session.pk, session.ct_mul(m2, v1_blinded),
                                  session.rng_a)
        c3 = session.send_cipher(A_TO_B, c3, "blinded_product")
        # (v1+r1)(v2+r2) - v1*r2 - v2*r1 - r1*r2 = v1*v2
        r1v, r2v = session.consume_mask(r1), session.consume_mask(r2)
        result = session.hom_add(c3, session.encrypt_at_b(-r1v * r2v % session.n))
        result = session.hom_add(result, session.ct_mul(c1, session.n - r2v))
        result = session.hom_add(result, session.ct_mul(c2, session.n - r1v))
        session.put_cipher_b(j, result)
    else:
        raise ProtocolError(f"unknown case {case}")


def _operand_kind(circuit: Circuit, idx: int) -> str:
    gate = circuit.gates[idx]
    if gate.kind in (GateKind.INPUT, GateKind.LOCAL):
        return gate.owner.value
    return "I"


_CASE_TABLE = {
    ("A", "B"): (OperandCase.AB, False),
    ("B", "A"): (OperandCase.AB, True),
    ("I", "A"): (OperandCase.IA, False),
    ("A", "I"): (OperandCase.IA, True),
    ("I", "B"): (OperandCase.IB, False),
    ("B", "I"): (OperandCase.IB, True),
    ("I", "I"): (OperandCase.II, False),
}


def reveal_scalar(session: ProtocolSession, ct: Ciphertext, level: int,
                  reveal: RevealMode) -> float:
    """Open a scalar result to the designated party and decode it.

    Toward the evaluator, the ciphertext is blinded with a full-ring mask
    first, so the key holder decrypts noise and returns it as plaintext.
    """
    if reveal in (RevealMode.TO_KEY_HOLDER, RevealMode.TO_BOTH):
        final = session.send_cipher(B_TO_A, ct, "result_for_key_holder")
        value = decode(session.decrypt_at_a(final), session.encoding,
                       session.n, level)
        if reveal == RevealMode.TO_BOTH:
            fixed = encode(value, session.encoding, session.n)
            session.send_plain(A_TO_B, fixed, "shared_result")
        return value
    r = session.new_mask(session.n, "reveal_blind")
    blinded = session.hom_add(ct, session.encrypt_at_b(r.value))
    blinded = session.send_cipher(B_TO_A, blinded, "masked_result")
    opened = session.send_plain(A_TO_B, session.decrypt_at_a(blinded),
                                "masked_reveal")
    fixed = (opened - session.consume_mask(r)) % session.n
    return decode(fixed, session.encoding, session.n, level)


def secure_poly(session: ProtocolSession, circuit: Circuit, levels: list[int],
                reveal: RevealMode, inputs_a: dict, inputs_b: dict) -> float:
    """Evaluate a compacted circuit gate by gate and reveal the result.

    Leaf values are fixed-point encoded into each owner's store; add/mul
    gates dispatch on operand ownership.  A circuit still containing a gate
    whose operands share one owner must be compacted first.
    """
    assignments = {Party.KEY_HOLDER: inputs_a, Party.EVALUATOR: inputs_b}
    for idx, (gate, wires) in enumerate(zip(circuit.gates, circuit.wires)):
        if gate.kind in (GateKind.INPUT, GateKind.LOCAL):
            source = assignments[gate.owner]
            if gate.kind == GateKind.INPUT:
                raw = source[gate.var_key]
            else:
                raw = gate.expr(source)
            fixed = encode(float(raw), session.encoding, session.n)
            if gate.owner == Party.KEY_HOLDER:
                session.put_plain_a(idx, fixed)
            else:
                session.put_plain_b(idx, fixed)
            continue
        kinds = (_operand_kind(circuit, wires[0]), _operand_kind(circuit, wires[1]))
        if kinds in (("A", "A"), ("B", "B")):
            raise ProtocolError("circuit is not compact; run local_compute first")
        op_case, swap = _CASE_TABLE[kinds]
        i1, i2 = (wires[1], wires[0]) if swap else wires
        l1, l2 = levels[i1], levels[i2]
        if gate.kind == GateKind.ADD:
            secure_add(session, op_case, i1, i2, idx, l1, l2, levels[idx])
        else:
            secure_mul(session, op_case, i1, i2, idx, l1, l2, levels[idx])

    out = circuit.output_index
    out_level = levels[out]
    sink = session.store_b.get(out)
    if isinstance(sink, StoredCipher):
        return reveal_scalar(session, sink.ct, out_level, reveal)
    # Fully local circuit: the value sits in plaintext at its owner.
    if out in session.store_a:
        value = decode(session.store_a[out], session.encoding, session.n, out_level)
        if reveal in (RevealMode.TO_EVALUATOR, RevealMode.TO_BOTH):
            session.send_plain(A_TO_B, session.store_a[out], "shared_result")
        return value
    value = decode(session._get_plain_b(out), session.encoding, session.n,
                   out_level)
    if reveal in (RevealMode.TO_KEY_HOLDER, RevealMode.TO_BOTH):
        ct = session.send_cipher(B_TO_A, session.encrypt_at_b(
            session._get_plain_b(out)), "result_for_key_holder")
        session.decrypt_at_a(ct)
    return value


def bipartite_compute(session: ProtocolSession, h_a: list[float],
                      h_b: list[float], g_a: float, g_b: float,
                      reveal: RevealMode) -> float:
    """Evaluate ``sum(h_a[i] * h_b[i]) + g_a + g_b`` from locally computed terms.

    Each factor list is already evaluated at its own party.  The key holder
    ships encryptions of its factors plus its additive term pre-scaled to the
    product level; the evaluator combines everything with one multiplication
    per product term.
    """
    if len(h_a) != len(h_b):
        raise ProtocolError("product term lists differ in length")
    enc, n = session.encoding, session.n
    scale = session.scale
    ha_fixed = [encode(v, enc, n) for v in h_a]
    ga_fixed = encode(g_a, enc, n) * scale % n
    cts = [session.encrypt_at_a(v) for v in ha_fixed]
    cts.append(session.encrypt_at_a(ga_fixed))
    cts = session.send_cipher_batch(A_TO_B, cts, "input_share")
    acc = session.encrypt_at_b(encode(g_b, enc, n) * scale % n)
    for ct, factor in zip(cts[:-1], h_b):
        acc = session.hom_add(acc, session.ct_mul(ct, encode(factor, enc, n)))
    acc = session.hom_add(acc, cts[-1])
    return reveal_scalar(session, acc, 2, reveal)


def secure_repack(session: ProtocolSession, in_rows: list[list], out_rows: list[list],
                  out_store_keys: list, value_bound: int) -> None:
    """Rearrange packed slots across ciphertexts without exposing values.

    ``in_rows`` names the current slot keys, one row per packed ciphertext in
    the evaluator's store; ``out_rows``/``out_store_keys`` describe the new
    arrangement.  The evaluator masks every slot with a fresh draw from
    ``[0, P - value_bound)``, the key holder decrypts the masked slots,
    reassembles them in the requested order, and re-encrypts.  The new
    variables still carry their masks, recorded slot-by-slot for later
    cancellation by the evaluator.
    """
    wanted = {key for row in out_rows for key in row}
    available = {key for row in in_rows for key in row}
    if not wanted <= available:
        raise ProtocolError(f"unknown repack keys: {sorted(wanted - available)!r}")

    sources: list[StoredPacked] = []
    for row in in_rows:
        store_key, _ = session.packed_index.get(row[0], (None, None))
        var = session.store_b.get(store_key)
        if not isinstance(var, StoredPacked) or list(var.keys[: len(row)]) != list(row):
            raise ProtocolError(f"row {row!r} does not name a packed variable")
        sources.append(var)

    layout = sources[0].layout
    margin = layout.slot_bits - value_bound.bit_length()
    if margin < MASK_MARGIN_BITS:
        raise MaskMarginError(
            f"slot bound leaves {margin} mask bits; need {MASK_MARGIN_BITS}"
        )
    mask_modulus = layout.slot_size - value_bound

    masked_cts = []
    mask_of: dict = {}
    for var, row in zip(sources, in_rows):
        row_masks = [session.new_mask(mask_modulus, "repack_slot")
                     for _ in range(len(row))]
        for key, record in zip(row, row_masks):
            mask_of[key] = record
        blind = pack([m.value for m in row_masks], layout)
        masked_cts.append(session.hom_add(var.ct, session.encrypt_at_b(blind)))
    masked_cts = session.send_cipher_batch(B_TO_A, masked_cts, "masked_slots")

    # Key holder opens masked slots, keyed by name.
    opened: dict = {}
    for ct, row in zip(masked_cts, in_rows):
        slots = unpack_raw(session.decrypt_at_a(ct), layout)
        for key, value in zip(row, slots):
            opened[key] = value

    fresh = [session.encrypt_at_a(pack([opened[key] for key in row], layout))
             for row in out_rows]
    fresh = session.send_cipher_batch(A_TO_B, fresh, "repacked_slots")

    level = sources[0].level
    for store_key, ct, row in zip(out_store_keys, fresh, out_rows):
        masks = tuple(mask_of[key].value for key in row)
        for key in row:
            mask_of[key].uses += 1
        session.register_packed(store_key, ct, layout, row, level, masks)
