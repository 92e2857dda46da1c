"""Epoch-level training of the social matrix-factorization model.

The trainer simulates the decentralized roles in one process: every user
owns its embedding row, every seller owns an item-embedding block and a
Paillier keypair, and each SGD step runs between one (user, seller) pair.
Plain and secure methods share the sampling schedule and the item-gradient
aggregation timing, so runs from the same seed trace the same trajectory up
to fixed-point error.

Bias handling: each embedding carries two extra coordinates, ``[...latent,
b, 1]`` for users and ``[...latent, 1, b]`` for items, so the dot product
picks up both bias terms.  The constant coordinates are frozen out of
updates and shrinkage.

Sign note: the step functions orient the social term toward the friends
(``f - u``), so a positive pull strength enters the step negated; descending
with ``u -= lr * grad`` then moves the user toward its friends.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from . import paillier
from .data import RatingDataset, rmse
from .encoding import EncodingParams
from .protocol import ProtocolSession
from .soreg import (
    GradientAggregator,
    SoRegModel,
    StepBatch,
    apply_update,
    encrypt_friend_embedding,
    inject_friend_embeddings,
    plaintext_sgd_step,
    secure_sgd_bipartite,
    secure_sgd_natural,
    step_layout,
)
from .transport import LoopbackChannel

METHODS = ("plain", "bipartite", "bipartite-packed", "natural", "natural-packed")

DEFAULT_SLOT_MOD_BITS = {"bipartite": 56, "natural": 80}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "plain"
    k: int = 8                      # latent dimension, biases excluded
    epochs: int = 5
    learning_rate: float = 0.003
    lambda_user: float = 0.0
    lambda_item: float = 0.0
    lambda_social: float = 0.0
    max_items: int = 8
    max_friends: int = 10
    key_bits: int = 512
    scale_bits: int = 23
    slot_mod_bits: int | None = None
    aggregation_threshold: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    @property
    def base_method(self) -> str:
        return self.method.replace("-packed", "")

    @property
    def packed(self) -> bool:
        return self.method.endswith("-packed")


class FactorModel:
    """Trained factors with bias coordinates and mean normalization."""

    def __init__(self, n_users: int, n_items: int, k: int, mean: float,
                 rs: np.random.RandomState):
        self.k = k
        self.mean = mean
        width = k + 2
        self.user_factors = np.zeros((n_users, width))
        self.item_factors = np.zeros((n_items, width))
        self.user_factors[:, :k] = rs.normal(0.0, 0.1, (n_users, k))
        self.item_factors[:, :k] = rs.normal(0.0, 0.1, (n_items, k))
        self.user_factors[:, k + 1] = 1.0  # meets the item bias
        self.item_factors[:, k] = 1.0      # meets the user bias

    @property
    def frozen_user(self):
        return (self.k + 1,)

    @property
    def frozen_item(self):
        return (self.k,)

    def predict(self, user: int, item: int) -> float:
        return float(self.user_factors[user] @ self.item_factors[item]) + self.mean


class _PlainAggregator:
    """Mirrors the encrypted aggregator's reveal schedule on numpy rows."""

    def __init__(self, threshold: int):
        self.threshold = threshold
        self.pending: dict = {}

    def add(self, item_key, grad_row):
        rows = self.pending.setdefault(item_key, [])
        rows.append(np.array(grad_row))
        if len(rows) < self.threshold:
            return None
        total = np.sum(rows, axis=0)
        del self.pending[item_key]
        return total


@dataclass
class _SellerState:
    session: ProtocolSession | None
    layout: object
    aggregator: object
    encoding: EncodingParams


class SoRegTrainer:
    def __init__(self, train_set: RatingDataset, test_set: RatingDataset,
                 config: TrainConfig):
        self.train_set = train_set
        self.test_set = test_set
        self.config = config
        ratings = [r for _, _, r in train_set.triples]
        self.mean = float(np.mean(ratings)) if ratings else 0.0
        self.model = FactorModel(train_set.n_users, train_set.n_items,
                                 config.k, self.mean,
                                 np.random.RandomState(config.seed))
        self._sample_rs = np.random.RandomState(config.seed + 1)
        self._crypto_rng = random.Random(config.seed + 2)
        self._by_user = train_set.ratings_by_user()
        self._friends = train_set.friends_of()
        self._sellers: dict[int, _SellerState] = {}
        self.history: list[float] = []

    # -- seller-side state -------------------------------------------------

    def _seller(self, seller_id: int) -> _SellerState:
        state = self._sellers.get(seller_id)
        if state is not None:
            return state
        cfg = self.config
        if cfg.method == "plain":
            state = _SellerState(None, None, _PlainAggregator(
                cfg.aggregation_threshold), None)
        else:
            scale = 1 << cfg.scale_bits
            mod_bits = cfg.slot_mod_bits or DEFAULT_SLOT_MOD_BITS[cfg.base_method]
            encoding = EncodingParams(scale, 1 << mod_bits)
            pk, sk = paillier.keygen(cfg.key_bits,
                                     random.Random(self._crypto_rng.getrandbits(64)))
            session = ProtocolSession(
                pk, sk, encoding, LoopbackChannel(),
                random.Random(self._crypto_rng.getrandbits(64)),
                random.Random(self._crypto_rng.getrandbits(64)))
            layout = None
            if cfg.packed:
                # One worst-case layout covers every step of the run.
                layout = step_layout(cfg.base_method, cfg.max_items,
                                     cfg.k + 2, cfg.max_friends, encoding,
                                     cfg.key_bits)
            aggregator = GradientAggregator(sk, encoding,
                                            cfg.aggregation_threshold)
            state = _SellerState(session, layout, aggregator, encoding)
        self._sellers[seller_id] = state
        return state

    # -- one SGD step --------------------------------------------------------

    def _sample_step(self, user: int):
        """Pick this round's items (grouped by seller) and friends."""
        rated = self._by_user.get(user, [])
        if not rated:
            return None
        count = min(self.config.max_items, len(rated))
        chosen = self._sample_rs.choice(len(rated), size=count, replace=False)
        by_seller: dict[int, list[tuple[int, float]]] = {}
        for idx in chosen:
            item, rating = rated[idx]
            by_seller.setdefault(self.train_set.item_seller[item], []).append(
                (item, rating))
        friend_ids = self._friends.get(user, [])
        if len(friend_ids) > self.config.max_friends:
            picked = self._sample_rs.choice(len(friend_ids),
                                            size=self.config.max_friends,
                                            replace=False)
            friend_ids = [friend_ids[i] for i in sorted(picked)]
        return by_seller, friend_ids

    def _step(self, user: int, seller_id: int, items: list[tuple[int, float]],
              friend_ids: list[int]) -> None:
        cfg = self.config
        item_ids = [item for item, _ in items]
        ratings = np.array([rating - self.mean for _, rating in items])
        weights = np.ones(len(items))
        friends = (self.model.user_factors[friend_ids]
                   if friend_ids else None)
        # Positive pull strength enters negated; see the module docstring.
        model = SoRegModel(
            self.model.user_factors[user].copy(),
            self.model.item_factors[item_ids].copy(),
            social_reg=-cfg.lambda_social,
            user_reg=cfg.lambda_user,
            item_reg=cfg.lambda_item,
            learning_rate=cfg.learning_rate,
        )
        batch = StepBatch(ratings, weights, friends)
        state = self._seller(seller_id)

        if cfg.method == "plain":
            grad_u, grad_v = plaintext_sgd_step(model, batch)
            opened = [(item_ids[i], state.aggregator.add(item_ids[i], grad_v[i]))
                      for i in range(len(item_ids))]
        else:
            session = state.session
            handles = None
            if batch.m:
                cts = [encrypt_friend_embedding(session.pk, fv, state.encoding,
                                                state.layout, self._crypto_rng)
                       for fv in friends]
                handles = inject_friend_embeddings(session, cts, state.layout,
                                                   cfg.k + 2)
            step_fn = (secure_sgd_natural if cfg.base_method == "natural"
                       else secure_sgd_bipartite)
            result = step_fn(session, model, batch, state.layout,
                             friend_handles=handles,
                             aggregator=state.aggregator, apply=False,
                             item_keys=item_ids)
            grad_u = result.grad_u
            opened = list(result.revealed_item_grads.items())

        # User update is immediate; item updates land when aggregation fires.
        self.model.user_factors[user] -= cfg.learning_rate * self._masked(
            grad_u, self.model.frozen_user)
        shrink = 1.0 - cfg.learning_rate * 2.0 * cfg.lambda_user
        self._shrink_row(self.model.user_factors[user], shrink,
                         self.model.frozen_user)

        for item, grad in opened:
            if grad is None:
                continue
            shrink_v = 1.0 - cfg.learning_rate * 2.0 * cfg.lambda_item
            self._shrink_row(self.model.item_factors[item], shrink_v,
                             self.model.frozen_item)
            self.model.item_factors[item] -= cfg.learning_rate * self._masked(
                grad, self.model.frozen_item)

    @staticmethod
    def _masked(grad, frozen):
        grad = np.array(grad, dtype=float)
        grad[list(frozen)] = 0.0
        return grad

    @staticmethod
    def _shrink_row(row, factor, frozen):
        keep = row[list(frozen)].copy()
        row *= factor
        row[list(frozen)] = keep

    # -- epochs ----------------------------------------------------------------

    def run_epoch(self) -> float:
        users = self._sample_rs.permutation(self.train_set.n_users)
        for user in users:
            sampled = self._sample_step(int(user))
            if sampled is None:
                continue
            by_seller, friend_ids = sampled
            for seller_id in sorted(by_seller):
                self._step(int(user), seller_id, by_seller[seller_id],
                           friend_ids)
        score = rmse(self.model.predict, self.test_set)
        if not np.isfinite(score):
            raise TrainingDiverged(
                f"non-finite validation RMSE after epoch {len(self.history) + 1}")
        self.history.append(score)
        return score

    def run(self) -> list[float]:
        for _ in range(self.config.epochs):
            self.run_epoch()
        return self.history

    def comm_totals(self) -> dict:
        """Bytes and transferred units over all seller channels."""
        totals = {"bytes": 0, "units": 0}
        for state in self._sellers.values():
            if state.session is not None:
                totals["bytes"] += state.session.channel.total_bytes()
                totals["units"] += state.session.channel.total_units()
        return totals


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: FactorModel, config: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("secrec-model v1\n")
        fh.write(f"k {model.k}\n")
        fh.write(f"users {len(model.user_factors)} "
                 f"items {len(model.item_factors)}\n")
        fh.write(f"mean {model.mean:.17g}\n")
        fh.write(f"lr {config.learning_rate:.17g} "
                 f"lambda_u {config.lambda_user:.17g} "
                 f"lambda_v {config.lambda_item:.17g} "
                 f"lambda_s {config.lambda_social:.17g}\n")
        for name, matrix in (("U", model.user_factors),
                             ("V", model.item_factors)):
            fh.write(f"{name}\n")
            for row in matrix:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_checkpoint(path: str) -> FactorModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if lines[0] != "secrec-model v1":
        raise ValueError(f"{path}: not a secrec model checkpoint")
    k = int(lines[1].split()[1])
    counts = lines[2].split()
    n_users, n_items = int(counts[1]), int(counts[3])
    mean = float(lines[3].split()[1])
    u_start = lines.index("U") + 1
    v_start = lines.index("V") + 1
    model = FactorModel(n_users, n_items, k, mean, np.random.RandomState(0))
    model.user_factors = np.array(
        [[float(x) for x in ln.split()] for ln in lines[u_start : u_start + n_users]])
    model.item_factors = np.array(
        [[float(x) for x in ln.split()] for ln in lines[v_start : v_start + n_items]])
    return model
