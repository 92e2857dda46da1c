"""Social-regularized matrix factorization with encrypted SGD.

One SGD step runs between a seller (the key holder, owning the item
embeddings) and a user (the evaluator, owning its embedding, ratings and
interaction weights).  Friends contribute their embeddings as ciphertexts
under the seller's key, so the social pull term never surfaces in plaintext.

The step gradients, with ``e_i = u . v_i - r_i``:

    grad_u = 2 * [ sum_i w_i e_i v_i  +  (lam_s / m) sum_j (f_j - u) ]
    grad_v_i = 2 * w_i e_i u

Note the social term of ``grad_u`` is oriented toward the friends; a trainer
descending the regularized loss with ``u -= lr * grad_u`` must negate
``lam_s`` when composing the step (see train.py).  L2 regularization is not
part of the step: each party shrinks its own embeddings locally.

Two secure variants compute the same update.  The expanded form multiplies
pre-computed local factor pairs and finishes in three transmissions; the
natural-order form computes the error terms first, reuses them for both
gradients, and needs five transmissions but far fewer ciphertexts.  Both
come packed (many values per plaintext, signs mod Q) or unpacked (scalar
ciphertexts mod N).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import paillier
from .circuit import ensure_level_fits
from .encoding import (
    EncodingParams,
    PackingLayout,
    PolynomialBound,
    build_layout,
    decode,
    encode,
    exact_slot_size,
    pack,
    unpack_raw,
)
from .paillier import Ciphertext, PublicKey
from .protocol import (
    MASK_MARGIN_BITS,
    MaskMarginError,
    ProtocolError,
    ProtocolSession,
    RevealMode,
)
from .transport import A_TO_B, B_TO_A


class AggregationError(RuntimeError):
    """Contributions disagree on items, layout, or level."""


@dataclass
class SoRegModel:
    """Per-step view of one user/seller pair.

    Embedding vectors may carry constant bias coordinates; the step treats
    every coordinate alike and leaves freezing to the trainer.
    """

    user_embedding: np.ndarray
    item_embeddings: np.ndarray  # (n, k)
    social_reg: float = 0.0
    user_reg: float = 0.0
    item_reg: float = 0.0
    learning_rate: float = 0.003


@dataclass
class StepBatch:
    ratings: np.ndarray
    weights: np.ndarray
    friend_embeddings: np.ndarray | None = None  # (m, k)

    @property
    def n(self) -> int:
        return len(self.ratings)

    @property
    def m(self) -> int:
        return 0 if self.friend_embeddings is None else len(self.friend_embeddings)


@dataclass
class StepResult:
    grad_u: np.ndarray
    grad_v: np.ndarray | None  # None while gradients sit in an aggregator
    legs: list[tuple[str, int, int]]  # (label, transferred units, bytes)
    revealed_item_grads: dict = field(default_factory=dict)

    @property
    def units(self) -> int:
        return sum(u for _, u, _ in self.legs)

    @property
    def bytes(self) -> int:
        return sum(b for _, _, b in self.legs)


def plaintext_sgd_step(model: SoRegModel, batch: StepBatch):
    """Reference gradients in exact real arithmetic."""
    u = model.user_embedding
    v = model.item_embeddings
    if batch.n:
        errors = v @ u - batch.ratings
        grad_u = 2.0 * ((batch.weights * errors) @ v)
        grad_v = 2.0 * np.outer(batch.weights * errors, u)
    else:
        grad_u = np.zeros_like(u)
        grad_v = np.zeros((0, len(u)))
    if batch.m and model.social_reg:
        pull = (batch.friend_embeddings - u).sum(axis=0)
        grad_u = grad_u + 2.0 * model.social_reg / batch.m * pull
    return grad_u, grad_v


def apply_update(model: SoRegModel, grad_u, grad_v=None, frozen_user=(),
                 frozen_item=()) -> None:
    """Gradient step with local multiplicative shrinkage.

    ``frozen_*`` name coordinates (bias constants) excluded from both the
    shrinkage and the update.
    """
    lr = model.learning_rate
    u_mask = np.ones_like(model.user_embedding)
    u_mask[list(frozen_user)] = 0.0
    shrink = 1.0 - lr * 2.0 * model.user_reg
    model.user_embedding *= np.where(u_mask > 0, shrink, 1.0)
    model.user_embedding -= lr * grad_u * u_mask
    if grad_v is not None and len(grad_v):
        v_mask = np.ones(model.item_embeddings.shape[1])
        v_mask[list(frozen_item)] = 0.0
        shrink_v = 1.0 - lr * 2.0 * model.item_reg
        model.item_embeddings *= np.where(v_mask > 0, shrink_v, 1.0)
        model.item_embeddings -= lr * grad_v * v_mask


# -- packing bounds ----------------------------------------------------------


def bipartite_step_bound(n: int, k: int, m: int, scale: int) -> PolynomialBound:
    """Worst slot value of the expanded-form gradients: (nk+n+m)Q^2 + mQS."""
    return PolynomialBound(((n * k + n + m, 2, 0), (m, 1, 1)), scale)


def natural_step_bound(n: int, k: int, m: int, scale: int) -> PolynomialBound:
    """Worst slot value along the natural-order pipeline:
    nk(3Q^3 + 2Q^2 S) + mQ^3."""
    return PolynomialBound(((3 * n * k, 3, 0), (2 * n * k, 2, 1), (m, 3, 0)), scale)


def infer_step_bound(k: int, scale: int) -> PolynomialBound:
    """Worst slot value of a packed dot product: kQ^2."""
    return PolynomialBound(((k, 2, 0),), scale)


def step_layout(method: str, n: int, k: int, m: int, enc: EncodingParams,
                key_bits: int, limb_bits: int = 1,
                slot_size: int | None = None) -> PackingLayout:
    """Exact-mode layout sized for one SGD step (or a given slot size)."""
    if slot_size is None:
        bound = {
            "bipartite": bipartite_step_bound,
            "natural": natural_step_bound,
        }[method](n, k, m, enc.scale)
        slot_size = exact_slot_size(bound, enc.slot_modulus, limb_bits)
    return build_layout(slot_size, enc.slot_modulus, enc.scale, key_bits)


# -- friend embeddings -------------------------------------------------------


def encrypt_friend_embedding(pk: PublicKey, vector, enc: EncodingParams,
                             layout: PackingLayout | None,
                             rng=None) -> list[Ciphertext]:
    """What a friend computes and hands to the user: its embedding encrypted
    under the seller's key, packed on the embedding axis when a layout is
    given."""
    vector = np.asarray(vector, dtype=float)
    if layout is None:
        n_mod = pk.n
        return [paillier.encrypt(pk, encode(float(x), enc, n_mod), rng)
                for x in vector]
    fixed = [encode(float(x), enc, layout.slot_modulus) for x in vector]
    cts = []
    for start in range(0, len(fixed), layout.slot_count):
        cts.append(paillier.encrypt(
            pk, pack(fixed[start : start + layout.slot_count], layout), rng))
    return cts


def inject_friend_embeddings(session: ProtocolSession, friend_ciphertexts,
                             layout: PackingLayout | None, k: int,
                             prefix: str = "friend") -> list[list]:
    """Register friends' ciphertexts in the evaluator's store.

    Returns one key list per friend (one key per embedding-axis chunk when
    packed, one per coordinate otherwise).  These arrive outside the
    user/seller channel and are not metered.
    """
    handles = []
    for j, cts in enumerate(friend_ciphertexts):
        keys = []
        if layout is None:
            if len(cts) != k:
                raise ProtocolError("friend vector length mismatch")
            for p, ct in enumerate(cts):
                key = (prefix, j, p)
                session.put_cipher_b(key, ct)
                keys.append(key)
        else:
            if len(cts) != layout.chunks(k):
                raise ProtocolError("friend ciphertext count does not match layout")
            for ch, ct in enumerate(cts):
                key = (prefix, j, ch)
                lo = ch * layout.slot_count
                width = min(layout.slot_count, k - lo)
                session.register_packed(
                    key, ct, layout, [(prefix, j, "slot", lo + s) for s in range(width)],
                    level=1)
                keys.append(key)
        handles.append(keys)
    return handles


# -- metering ----------------------------------------------------------------


class _LegMeter:
    def __init__(self, session: ProtocolSession):
        self.channel = session.channel
        self.legs: list[tuple[str, int, int]] = []
        self._units, self._bytes = self._totals()

    def _totals(self):
        return self.channel.total_units(), self.channel.total_bytes()

    def mark(self, label: str) -> None:
        units, nbytes = self._totals()
        self.legs.append((label, units - self._units, nbytes - self._bytes))
        self._units, self._bytes = units, nbytes


def _chunks(length: int, width: int):
    for start in range(0, length, width):
        yield range(start, min(start + width, length))


def _require_int_weights(weights) -> list[int]:
    w = []
    for value in weights:
        if float(value) != int(value) or value < 0:
            raise ValueError(
                "natural-order steps need non-negative integer weights"
            )
        w.append(int(value))
    return w


# -- natural-order secure step ------------------------------------------------


def secure_sgd_natural(session: ProtocolSession, model: SoRegModel,
                       batch: StepBatch, layout: PackingLayout | None,
                       friend_handles=None, aggregator=None,
                       apply: bool = True, item_keys=None) -> StepResult:
    """Error terms first: five transmissions, gradients at level 3.

    Packed flow: item embeddings arrive packed along items; the user builds
    packed error terms, masks every slot, and the seller opens them to (a)
    accumulate the masked error-weighted sum for the user gradient and (b)
    re-encrypt each masked error as a scalar for the item gradients.  The
    user cancels the masks mod Q downstream.  Without packing the repack leg
    disappears because the user still holds its own scalar error ciphertexts.
    """
    if batch.n < 1:
        raise ProtocolError("step needs at least one rated item")
    w = _require_int_weights(batch.weights)
    if layout is None:
        return _natural_unpacked(session, model, batch, w, friend_handles,
                                 aggregator, apply, item_keys)
    return _natural_packed(session, model, batch, w, layout, friend_handles,
                           aggregator, apply, item_keys)


def _natural_packed(session, model, batch, w, layout, friend_handles,
                    aggregator, apply, item_keys=None):
    enc = session.encoding
    s, q, p_size = enc.scale, layout.slot_modulus, layout.slot_size
    u, v = model.user_embedding, model.item_embeddings
    n, k, m = batch.n, len(u), batch.m
    slots = layout.slot_count
    meter = _LegMeter(session)

    sup = _gradient_sup(model, batch)
    ensure_level_fits(3, s, q, sup)

    # Per-slot bound of a packed error term; masks live below the slot size.
    err_bound = k * q * q + q * s
    margin = layout.slot_bits - err_bound.bit_length()
    if margin < MASK_MARGIN_BITS:
        raise MaskMarginError(f"error-slot masks get only {margin} bits")
    mask_mod = p_size - err_bound

    v_fix = [[encode(float(v[i][p]), enc, q) for p in range(k)] for i in range(n)]
    u_fix = [encode(float(u[p]), enc, q) for p in range(k)]

    # Leg 1: item embeddings packed along the item axis, one group per
    # embedding coordinate.
    item_chunks = list(_chunks(n, slots))
    leg1 = session.encrypt_many_at_a(
        [pack([v_fix[i][p] for i in chunk], layout)
         for p in range(k) for chunk in item_chunks])
    leg1 = session.send_cipher_batch(A_TO_B, leg1, "item_embeddings")
    ct_v_items = [
        leg1[p * len(item_chunks) : (p + 1) * len(item_chunks)] for p in range(k)
    ]
    meter.mark("item_embeddings")

    # User: packed error terms (u . v_i - r_i at level 2), one mask per slot.
    rho = [session.new_mask(mask_mod, "error_slot") for _ in range(n)]
    masked_err = []
    for ci, chunk in enumerate(item_chunks):
        local = [
            (encode(-float(batch.ratings[i]), enc, q) * s + rho[i].value)
            for i in chunk
        ]
        acc = session.encrypt_at_b(pack(local, layout))
        for p in range(k):
            acc = session.hom_add(
                acc, session.ct_mul(ct_v_items[p][ci], u_fix[p]))
        masked_err.append(acc)
    masked_err = session.send_cipher_batch(B_TO_A, masked_err, "masked_errors")
    meter.mark("masked_errors")

    # Seller: open masked error slots, fold them into the user-gradient sum,
    # and re-encrypt each one as a scalar for the item gradients.
    m_vals = []
    for ct, chunk in zip(masked_err, item_chunks):
        slots_raw = unpack_raw(session.decrypt_at_a(ct), layout)
        m_vals.extend(slots_raw[: len(chunk)])
    d_sum = [sum(w[i] * m_vals[i] * v_fix[i][p] for i in range(n)) % q
             for p in range(k)]
    emb_chunks = list(_chunks(k, slots))
    leg3_values = [pack([d_sum[p] for p in chunk], layout)
                   for chunk in emb_chunks]
    leg3_values += [m_vals[i] % q for i in range(n)]
    leg3_values += [pack([v_fix[i][p] for p in chunk], layout)
                    for i in range(n) for chunk in emb_chunks]
    leg3 = session.send_cipher_batch(
        A_TO_B, session.encrypt_many_at_a(leg3_values), "masked_error_products")
    d_cts = leg3[: len(emb_chunks)]
    e_cts = leg3[len(emb_chunks) : len(emb_chunks) + n]
    vp_cts = [
        leg3[len(emb_chunks) + n + i * len(emb_chunks):
             len(emb_chunks) + n + (i + 1) * len(emb_chunks)]
        for i in range(n)
    ]
    meter.mark("error_products_and_repack")

    # User: cancel masks mod Q and assemble both gradients at level 3.
    lam = model.social_reg / m if m else 0.0
    grad_u_cts = []
    reveal_masks = []
    for ci, chunk in enumerate(emb_chunks):
        acc = d_cts[ci]
        for i in range(n):
            cancel = -(w[i] * rho[i].value) % q
            acc = session.hom_add(acc, session.ct_mul(vp_cts[i][ci], cancel))
        if m:
            lam_fix = encode(lam, enc, q)
            for keys in friend_handles:
                f_var = session.store_b[keys[ci]]
                acc = session.hom_add(
                    acc, session.ct_mul(f_var.ct, lam_fix * s))
            local = [encode(-model.social_reg * float(u[p]), enc, q) * s * s
                     for p in chunk]
            acc = session.hom_add(acc, session.encrypt_at_b(pack(local, layout)))
        z = session.new_mask(session.n, "reveal_blind")
        reveal_masks.append(z)
        grad_u_cts.append(session.hom_add(acc, session.encrypt_at_b(z.value)))

    grad_v_cts = []
    for i in range(n):
        unmask = session.encrypt_at_b(q - rho[i].value % q)
        session.consume_mask(rho[i])
        e_clean = session.hom_add(e_cts[i], unmask)
        row = []
        for chunk in emb_chunks:
            mult = pack([(w[i] * u_fix[p]) % q for p in chunk], layout)
            row.append(session.ct_mul(e_clean, mult))
        grad_v_cts.append(row)

    leg4 = grad_u_cts + [ct for row in grad_v_cts for ct in row]
    leg4 = session.send_cipher_batch(B_TO_A, leg4, "masked_gradients")
    grad_u_cts = leg4[: len(emb_chunks)]
    grad_v_cts = [
        leg4[len(emb_chunks) + i * len(emb_chunks):
             len(emb_chunks) + (i + 1) * len(emb_chunks)]
        for i in range(n)
    ]
    meter.mark("gradients_up")

    grad_v, revealed = _open_item_grads(session, grad_v_cts, layout, 3, k,
                                        aggregator, level_modulus=q,
                                        item_keys=item_keys)
    opened = [
        session.send_plain(A_TO_B, session.decrypt_at_a(ct), "masked_reveal")
        for ct in grad_u_cts
    ]
    meter.mark("user_gradient_reveal")

    grad_u = _open_user_grad(session, opened, reveal_masks, emb_chunks, layout,
                             enc, q, 3, k)
    if apply:
        apply_update(model, grad_u, grad_v)
    return StepResult(grad_u, grad_v, meter.legs, revealed)


def _natural_unpacked(session, model, batch, w, friend_handles, aggregator,
                      apply, item_keys=None):
    enc = session.encoding
    s, n_mod = enc.scale, session.n
    u, v = model.user_embedding, model.item_embeddings
    n, k, m = batch.n, len(u), batch.m
    meter = _LegMeter(session)
    ensure_level_fits(3, s, n_mod, _gradient_sup(model, batch))

    v_fix = [[encode(float(v[i][p]), enc, n_mod) for p in range(k)]
             for i in range(n)]
    u_fix = [encode(float(u[p]), enc, n_mod) for p in range(k)]

    leg1 = session.send_cipher_batch(
        A_TO_B,
        session.encrypt_many_at_a(
            [v_fix[i][p] for i in range(n) for p in range(k)]),
        "item_embeddings",
    )
    ct_v = [leg1[i * k : (i + 1) * k] for i in range(n)]
    meter.mark("item_embeddings")

    # Scalar error ciphertexts stay with the user; only masked copies travel.
    rho = [session.new_mask(n_mod, "error_blind") for _ in range(n)]
    e_cts = []
    masked = []
    for i in range(n):
        acc = session.encrypt_at_b(encode(-float(batch.ratings[i]), enc, n_mod)
                                   * s % n_mod)
        for p in range(k):
            acc = session.hom_add(acc, session.ct_mul(ct_v[i][p], u_fix[p]))
        e_cts.append(acc)
        masked.append(session.hom_add(acc, session.encrypt_at_b(rho[i].value)))
    masked = session.send_cipher_batch(B_TO_A, masked, "masked_errors")
    meter.mark("masked_errors")

    m_vals = [session.decrypt_at_a(ct) for ct in masked]
    d_sum = [sum(w[i] * m_vals[i] * v_fix[i][p] for i in range(n)) % n_mod
             for p in range(k)]
    leg3 = session.encrypt_many_at_a(
        d_sum + [v_fix[i][p] for i in range(n) for p in range(k)])
    leg3 = session.send_cipher_batch(A_TO_B, leg3, "masked_error_products")
    d_cts = leg3[:k]
    vp_cts = [leg3[k + i * k : k + (i + 1) * k] for i in range(n)]
    meter.mark("error_products")

    lam = model.social_reg / m if m else 0.0
    grad_u_cts, reveal_masks = [], []
    for p in range(k):
        acc = d_cts[p]
        for i in range(n):
            acc = session.hom_add(
                acc, session.ct_mul(vp_cts[i][p],
                                    -(w[i] * rho[i].value) % n_mod))
        if m:
            lam_fix = encode(lam, enc, n_mod)
            for keys in friend_handles:
                f_ct = session.store_b[keys[p]].ct
                acc = session.hom_add(
                    acc, session.ct_mul(f_ct, lam_fix * s % n_mod))
            acc = session.hom_add(acc, session.encrypt_at_b(
                encode(-model.social_reg * float(u[p]), enc, n_mod)
                * s * s % n_mod))
        z = session.new_mask(n_mod, "reveal_blind")
        reveal_masks.append(z)
        grad_u_cts.append(session.hom_add(acc, session.encrypt_at_b(z.value)))
    for record in rho:
        session.consume_mask(record)

    grad_v_cts = [
        [session.ct_mul(e_cts[i], w[i] * u_fix[p] % n_mod) for p in range(k)]
        for i in range(n)
    ]
    leg4 = grad_u_cts + [ct for row in grad_v_cts for ct in row]
    leg4 = session.send_cipher_batch(B_TO_A, leg4, "masked_gradients")
    grad_u_cts = leg4[:k]
    grad_v_cts = [leg4[k + i * k : k + (i + 1) * k] for i in range(n)]
    meter.mark("gradients_up")

    grad_v, revealed = _open_item_grads(session, grad_v_cts, None, 3, k,
                                        aggregator, level_modulus=n_mod,
                                        item_keys=item_keys)
    opened = [
        session.send_plain(A_TO_B, session.decrypt_at_a(ct), "masked_reveal")
        for ct in grad_u_cts
    ]
    meter.mark("user_gradient_reveal")

    grad_u = np.array([
        2.0 * decode((opened[p] - session.consume_mask(reveal_masks[p]))
                     % n_mod, enc, n_mod, 3)
        for p in range(k)
    ])
    if apply:
        apply_update(model, grad_u, grad_v)
    return StepResult(grad_u, grad_v, meter.legs, revealed)


# -- expanded (factor-pair) secure step ---------------------------------------


def secure_sgd_bipartite(session: ProtocolSession, model: SoRegModel,
                         batch: StepBatch, layout: PackingLayout | None,
                         friend_handles=None, aggregator=None,
                         apply: bool = True, item_keys=None) -> StepResult:
    """Expanded form: every gradient term is a product of one seller-local
    and one user-local factor, so three transmissions suffice and results sit
    at level 2.  Costs one ciphertext per (item, coordinate) factor pair.
    """
    if batch.n < 1:
        raise ProtocolError("step needs at least one rated item")
    enc = session.encoding
    packed = layout is not None
    q = layout.slot_modulus if packed else session.n
    s = enc.scale
    u, v = model.user_embedding, model.item_embeddings
    n, k, m = batch.n, len(u), batch.m
    weights = [float(x) for x in batch.weights]
    meter = _LegMeter(session)
    ensure_level_fits(2, s, q, _gradient_sup(model, batch))

    v_fix = [[encode(float(v[i][p]), enc, q) for p in range(k)] for i in range(n)]
    emb_chunks = list(_chunks(k, layout.slot_count)) if packed else \
        [range(p, p + 1) for p in range(k)]

    def pack_row(values) -> int:
        return pack(values, layout) if packed else values[0]

    # Leg 1: packed embedding rows, packed local products v_iq * v_ip, and
    # scalar coordinate ciphertexts.  Without packing the scalar coordinates
    # already serve as the rows, so they are sent once.
    leg1_values = []
    if packed:
        for i in range(n):
            for chunk in emb_chunks:
                leg1_values.append(pack_row([v_fix[i][p] for p in chunk]))
    for i in range(n):
        for p in range(k):
            for chunk in emb_chunks:
                leg1_values.append(pack_row(
                    [encode(float(v[i][p]) * float(v[i][pp]), enc, q)
                     for pp in chunk]))
    for i in range(n):
        for p in range(k):
            leg1_values.append(v_fix[i][p])
    leg1 = session.send_cipher_batch(
        A_TO_B, session.encrypt_many_at_a(leg1_values), "item_factors")
    n_chunks = len(emb_chunks)
    if packed:
        ct_vp = [leg1[i * n_chunks : (i + 1) * n_chunks] for i in range(n)]
        offset = n * n_chunks
    else:
        offset = 0
    ct_vv = [
        [leg1[offset + (i * k + p) * n_chunks : offset + (i * k + p + 1) * n_chunks]
         for p in range(k)]
        for i in range(n)
    ]
    scalar_base = offset + n * k * n_chunks
    ct_vq = [leg1[scalar_base + i * k : scalar_base + (i + 1) * k]
             for i in range(n)]
    if not packed:
        ct_vp = ct_vq
    meter.mark("item_factors")

    lam = model.social_reg / m if m else 0.0
    grad_u_cts, reveal_masks = [], []
    for ci, chunk in enumerate(emb_chunks):
        if m:
            local = [encode(-model.social_reg * float(u[p]), enc, q) * s
                     for p in chunk]
        else:
            local = [0 for _ in chunk]
        acc = session.encrypt_at_b(pack_row(local))
        for i in range(n):
            for p in range(k):
                acc = session.hom_add(acc, session.ct_mul(
                    ct_vv[i][p][ci],
                    encode(weights[i] * float(u[p]), enc, q)))
            acc = session.hom_add(acc, session.ct_mul(
                ct_vp[i][ci],
                encode(-weights[i] * float(batch.ratings[i]), enc, q)))
        if m:
            lam_fix = encode(lam, enc, q)
            for keys in friend_handles:
                f_ct = session.store_b[keys[ci]].ct
                acc = session.hom_add(acc, session.ct_mul(f_ct, lam_fix))
        z = session.new_mask(session.n, "reveal_blind")
        reveal_masks.append(z)
        grad_u_cts.append(session.hom_add(acc, session.encrypt_at_b(z.value)))

    grad_v_cts = []
    for i in range(n):
        row = []
        for chunk in emb_chunks:
            acc = session.encrypt_at_b(pack_row(
                [encode(-weights[i] * float(batch.ratings[i]) * float(u[p]),
                        enc, q) * s
                 for p in chunk]))
            for p in range(k):
                mult = pack_row([encode(weights[i] * float(u[p]) * float(u[pp]),
                                        enc, q) for pp in chunk])
                acc = session.hom_add(acc, session.ct_mul(ct_vq[i][p], mult))
            row.append(acc)
        grad_v_cts.append(row)

    leg2 = grad_u_cts + [ct for row in grad_v_cts for ct in row]
    leg2 = session.send_cipher_batch(B_TO_A, leg2, "masked_gradients")
    grad_u_cts = leg2[:n_chunks]
    grad_v_cts = [leg2[n_chunks + i * n_chunks : n_chunks + (i + 1) * n_chunks]
                  for i in range(n)]
    meter.mark("gradients_up")

    grad_v, revealed = _open_item_grads(session, grad_v_cts, layout, 2, k,
                                        aggregator, level_modulus=q,
                                        item_keys=item_keys)
    opened = [
        session.send_plain(A_TO_B, session.decrypt_at_a(ct), "masked_reveal")
        for ct in grad_u_cts
    ]
    meter.mark("user_gradient_reveal")

    grad_u = _open_user_grad(session, opened, reveal_masks, emb_chunks, layout,
                             enc, q, 2, k)
    if apply:
        apply_update(model, grad_u, grad_v)
    return StepResult(grad_u, grad_v, meter.legs, revealed)


# -- shared gradient opening ---------------------------------------------------


def _gradient_sup(model: SoRegModel, batch: StepBatch) -> float:
    u_max = float(np.max(np.abs(model.user_embedding), initial=1.0))
    v_max = float(np.max(np.abs(model.item_embeddings), initial=1.0))
    r_max = float(np.max(np.abs(batch.ratings), initial=1.0))
    w_max = float(np.max(np.abs(batch.weights), initial=1.0))
    k = len(model.user_embedding)
    err = k * u_max * v_max + r_max
    social = abs(model.social_reg) * (
        float(np.max(np.abs(batch.friend_embeddings), initial=0.0)) + u_max
        if batch.m else 0.0)
    return 2.0 * (batch.n * w_max * err * max(u_max, v_max) + social) + 1.0


def _open_user_grad(session, opened, reveal_masks, emb_chunks, layout, enc, q,
                    level, k) -> np.ndarray:
    grad = np.zeros(k)
    for ci, chunk in enumerate(emb_chunks):
        fixed = (opened[ci] - session.consume_mask(reveal_masks[ci])) % session.n
        if layout is None:
            grad[chunk[0]] = 2.0 * decode(fixed, enc, q, level)
        else:
            slots = unpack_raw(fixed, layout)
            for offset, p in enumerate(chunk):
                grad[p] = 2.0 * decode(slots[offset] % q, enc, q, level)
    return grad


def _open_item_grads(session, grad_v_cts, layout, level, k, aggregator,
                     level_modulus, item_keys=None):
    """Seller side: decrypt item gradients, or park them in the aggregator.

    Returns ``(grads, revealed)``: direct decryption fills ``grads``; with an
    aggregator, ``revealed`` maps item keys whose threshold just fired to the
    decoded gradient sums.
    """
    if aggregator is not None:
        keys = item_keys if item_keys is not None else range(len(grad_v_cts))
        revealed = {}
        for key, row in zip(keys, grad_v_cts):
            grad = aggregator.add(key, row, layout, level, k)
            if grad is not None:
                revealed[key] = grad
        return None, revealed
    enc = session.encoding
    grads = []
    for row in grad_v_cts:
        grads.append(decode_item_grad_row(
            [session.decrypt_at_a(ct) for ct in row], layout, enc,
            level_modulus, level, k))
    return np.array(grads), {}


def decode_item_grad_row(values, layout, enc, modulus, level, k) -> np.ndarray:
    grad = np.zeros(k)
    if layout is None:
        for p, value in enumerate(values):
            grad[p] = 2.0 * decode(value, enc, modulus, level)
        return grad
    for ci, chunk in enumerate(_chunks(k, layout.slot_count)):
        slots = unpack_raw(values[ci], layout)
        for offset, p in enumerate(chunk):
            grad[p] = 2.0 * decode(slots[offset] % modulus, enc, modulus, level)
    return grad


# -- item-gradient aggregation -------------------------------------------------


class GradientAggregator:
    """Sums users' encrypted item gradients before the seller sees them.

    Nothing is revealed until at least ``threshold`` users contributed to an
    item; a single user's gradient is proportional to its embedding, so the
    minimum of two already blocks direct inversion.
    """

    def __init__(self, secret_key, encoding: EncodingParams, threshold: int = 2):
        if threshold < 2:
            raise ValueError("aggregation threshold must be at least 2")
        self.sk = secret_key
        self.encoding = encoding
        self.threshold = threshold
        self.pending: dict = {}

    def add(self, item_key, cts, layout, level, k) -> np.ndarray | None:
        """Queue one user's gradient ciphertexts for an item.

        Returns the decoded gradient sum once the threshold is met, else
        ``None``.
        """
        entry = self.pending.setdefault(item_key, {"rows": [], "meta": None})
        meta = (layout, level, k)
        if entry["meta"] is None:
            entry["meta"] = meta
        elif entry["meta"] != meta:
            raise AggregationError(f"item {item_key!r}: mismatched contribution")
        entry["rows"].append(list(cts))
        if len(entry["rows"]) < self.threshold:
            return None
        pk = self.sk.public_key
        summed = entry["rows"][0]
        for row in entry["rows"][1:]:
            summed = [paillier.hom_add(pk, a, b) for a, b in zip(summed, row)]
        del self.pending[item_key]
        modulus = layout.slot_modulus if layout is not None else pk.n
        return decode_item_grad_row(
            [paillier.decrypt(self.sk, ct) for ct in summed], layout,
            self.encoding, modulus, level, k)

    def pending_counts(self) -> dict:
        return {key: len(entry["rows"]) for key, entry in self.pending.items()}


def aggregate_item_gradients(aggregator: GradientAggregator,
                             contributions) -> dict:
    """Feed ``(item_key, cts, layout, level, k)`` tuples; return what opened."""
    revealed = {}
    for item_key, cts, layout, level, k in contributions:
        grad = aggregator.add(item_key, cts, layout, level, k)
        if grad is not None:
            revealed[item_key] = grad
    return revealed


# -- encrypted inference --------------------------------------------------------


def secure_infer(session: ProtocolSession, user_vec, item_matrix,
                 layout: PackingLayout | None = None,
                 reveal: RevealMode = RevealMode.TO_EVALUATOR) -> np.ndarray:
    """Predicted ratings ``u . v_i`` without exposing either embedding.

    Packed mode batches items: the seller sends one ciphertext group per
    embedding coordinate, the user combines them into packed predictions,
    and the reveal opens whole prediction vectors at once.
    """
    enc = session.encoding
    user_vec = np.asarray(user_vec, dtype=float)
    item_matrix = np.asarray(item_matrix, dtype=float)
    n, k = item_matrix.shape
    q = layout.slot_modulus if layout is not None else session.n
    ensure_level_fits(2, enc.scale, q,
                      float(k * np.max(np.abs(user_vec) + 1.0)
                            * np.max(np.abs(item_matrix) + 1.0)))
    u_fix = [encode(float(x), enc, q) for x in user_vec]

    if layout is None:
        leg1 = session.send_cipher_batch(
            A_TO_B,
            session.encrypt_many_at_a(
                [encode(float(item_matrix[i][p]), enc, q)
                 for i in range(n) for p in range(k)]),
            "item_embeddings")
        preds = []
        for i in range(n):
            acc = session.ct_mul(leg1[i * k], u_fix[0])
            for p in range(1, k):
                acc = session.hom_add(
                    acc, session.ct_mul(leg1[i * k + p], u_fix[p]))
            preds.append(acc)
        out = np.array([
            _reveal_packed_scalar(session, ct, enc, q, reveal) for ct in preds
        ])
        return out

    item_chunks = list(_chunks(n, layout.slot_count))
    leg1 = session.send_cipher_batch(
        A_TO_B,
        session.encrypt_many_at_a(
            [pack([encode(float(item_matrix[i][p]), enc, q) for i in chunk],
                  layout)
             for p in range(k) for chunk in item_chunks]),
        "item_embeddings")
    preds = []
    for ci in range(len(item_chunks)):
        acc = session.ct_mul(leg1[ci], u_fix[0])
        for p in range(1, k):
            acc = session.hom_add(
                acc, session.ct_mul(leg1[p * len(item_chunks) + ci], u_fix[p]))
        preds.append(acc)

    out = np.zeros(n)
    if reveal == RevealMode.TO_KEY_HOLDER:
        opened = session.send_cipher_batch(B_TO_A, preds, "result_for_key_holder")
        for ct, chunk in zip(opened, item_chunks):
            slots = unpack_raw(session.decrypt_at_a(ct), layout)
            for offset, i in enumerate(chunk):
                out[i] = decode(slots[offset] % q, enc, q, 2)
        return out
    masks = [session.new_mask(session.n, "reveal_blind") for _ in preds]
    blinded = [session.hom_add(ct, session.encrypt_at_b(z.value))
               for ct, z in zip(preds, masks)]
    blinded = session.send_cipher_batch(B_TO_A, blinded, "masked_result")
    for ct, z, chunk in zip(blinded, masks, item_chunks):
        opened = session.send_plain(A_TO_B, session.decrypt_at_a(ct),
                                    "masked_reveal")
        fixed = (opened - session.consume_mask(z)) % session.n
        slots = unpack_raw(fixed, layout)
        for offset, i in enumerate(chunk):
            out[i] = decode(slots[offset] % q, enc, q, 2)
    return out


def _reveal_packed_scalar(session, ct, enc, q, reveal) -> float:
    if reveal == RevealMode.TO_KEY_HOLDER:
        opened = session.send_cipher(B_TO_A, ct, "result_for_key_holder")
        return decode(session.decrypt_at_a(opened) % q, enc, q, 2)
    z = session.new_mask(session.n, "reveal_blind")
    blinded = session.hom_add(ct, session.encrypt_at_b(z.value))
    blinded = session.send_cipher(B_TO_A, blinded, "masked_result")
    opened = session.send_plain(A_TO_B, session.decrypt_at_a(blinded),
                                "masked_reveal")
    fixed = (opened - session.consume_mask(z)) % session.n
    return decode(fixed % q if q != session.n else fixed, enc, q, 2)
