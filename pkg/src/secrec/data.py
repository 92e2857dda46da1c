"""Rating datasets: TSV ingestion, synthetic generation, splits, RMSE.

File formats (UTF-8, LF):
    ratings TSV:  user<TAB>item<TAB>rating
    edges TSV:    user<TAB>user
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Malformed dataset line, reported with its location."""


@dataclass
class RatingDataset:
    triples: list[tuple[int, int, float]]
    social_edges: list[tuple[int, int]]
    n_users: int
    n_items: int
    item_seller: dict[int, int] = field(default_factory=dict)
    rating_range: tuple[float, float] = (0.0, 5.0)

    def __post_init__(self):
        if not self.item_seller:
            self.item_seller = {i: 0 for i in range(self.n_items)}

    @property
    def n_sellers(self) -> int:
        return len(set(self.item_seller.values())) or 1

    def assign_sellers(self, n_sellers: int) -> None:
        """Contiguous item blocks per seller."""
        block = -(-self.n_items // n_sellers)
        self.item_seller = {i: i // block for i in range(self.n_items)}

    def ratings_by_user(self) -> dict[int, list[tuple[int, float]]]:
        by_user: dict[int, list[tuple[int, float]]] = {}
        for user, item, rating in self.triples:
            by_user.setdefault(user, []).append((item, rating))
        return by_user

    def friends_of(self) -> dict[int, list[int]]:
        friends: dict[int, set[int]] = {}
        for a, b in self.social_edges:
            friends.setdefault(a, set()).add(b)
            friends.setdefault(b, set()).add(a)
        return {u: sorted(vs) for u, vs in friends.items()}


def load_dataset(path: str, format: str) -> RatingDataset:
    """Parse a ratings or edges TSV with dense id remapping.

    ``format`` is ``ratings-tsv`` or ``edges-tsv``.  An edges file yields a
    dataset with no triples; merge with :func:`attach_edges`.
    """
    if format not in ("ratings-tsv", "edges-tsv"):
        raise ParseError(f"unknown format {format!r}")
    triples: list[tuple[int, int, float]] = []
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    users: dict[str, int] = {}
    items: dict[str, int] = {}

    def uid(token: str) -> int:
        return users.setdefault(token, len(users))

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            try:
                if format == "ratings-tsv":
                    if len(fields) != 3:
                        raise ValueError("expected user<TAB>item<TAB>rating")
                    user = uid(fields[0])
                    item = items.setdefault(fields[1], len(items))
                    pair = (user, item)
                    if pair in seen:
                        raise ValueError(f"duplicate rating for {fields[0]}/{fields[1]}")
                    seen.add(pair)
                    triples.append((user, item, float(fields[2])))
                else:
                    if len(fields) != 2:
                        raise ValueError("expected user<TAB>user")
                    edges.append((uid(fields[0]), uid(fields[1])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    ratings = [r for _, _, r in triples] or [0.0]
    return RatingDataset(triples, edges, len(users), len(items),
                         rating_range=(min(ratings), max(ratings)))


def save_dataset(dataset: RatingDataset, ratings_path: str,
                 edges_path: str | None = None) -> None:
    with open(ratings_path, "w", encoding="utf-8") as fh:
        for user, item, rating in dataset.triples:
            fh.write(f"{user}\t{item}\t{rating:.10g}\n")
    if edges_path is not None:
        with open(edges_path, "w", encoding="utf-8") as fh:
            for a, b in dataset.social_edges:
                fh.write(f"{a}\t{b}\n")


def attach_edges(dataset: RatingDataset, edges: RatingDataset) -> RatingDataset:
    """Merge an edges-only dataset into a ratings dataset (shared user ids)."""
    dataset.social_edges = list(edges.social_edges)
    return dataset


def synth_lowrank(n_users: int, n_items: int, k_true: int, noise_sd: float,
                  social_density: float, seed: int,
                  ratings_per_user: int = 20,
                  cluster_size: int = 4) -> RatingDataset:
    """Low-rank synthetic ratings with cluster-structured social edges.

    Users come in clusters sharing one ground-truth embedding (plus a small
    perturbation); social edges link users inside a cluster with probability
    ``social_density``, so befriended users genuinely have similar tastes and
    a social pull term has signal to exploit.
    """
    rs = np.random.RandomState(seed)
    n_clusters = max(1, n_users // cluster_size)
    centers = rs.normal(0.0, 1.0, (n_clusters, k_true))
    cluster_of = rs.randint(0, n_clusters, n_users)
    user_factors = centers[cluster_of] + rs.normal(0.0, 0.05, (n_users, k_true))
    item_factors = rs.normal(0.0, 1.0, (n_items, k_true))

    triples = []
    for user in range(n_users):
        count = min(ratings_per_user, n_items)
        for item in rs.choice(n_items, size=count, replace=False):
            value = float(user_factors[user] @ item_factors[item])
            if noise_sd:
                value += rs.normal(0.0, noise_sd)
            triples.append((user, int(item), value))

    edges = []
    members: dict[int, list[int]] = {}
    for user, cluster in enumerate(cluster_of):
        members.setdefault(int(cluster), []).append(user)
    for group in members.values():
        for i, a in enumerate(group):
            for b in group[i + 1 :]:
                if rs.rand() < social_density:
                    edges.append((a, b))

    ratings = [r for _, _, r in triples]
    return RatingDataset(triples, edges, n_users, n_items,
                         rating_range=(min(ratings), max(ratings)))


@dataclass(frozen=True)
class Split:
    train_fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must be in (0, 1)")


def split_dataset(dataset: RatingDataset, split: Split):
    """Deterministic disjoint train/test split of the rating triples."""
    rs = np.random.RandomState(split.seed)
    order = rs.permutation(len(dataset.triples))
    cut = int(round(split.train_fraction * len(order)))
    train_idx = set(order[:cut].tolist())
    train, test = [], []
    for idx, triple in enumerate(dataset.triples):
        (train if idx in train_idx else test).append(triple)
    make = lambda triples: RatingDataset(
        triples, dataset.social_edges, dataset.n_users, dataset.n_items,
        dict(dataset.item_seller), dataset.rating_range)
    return make(train), make(test)


def rmse(predict, testset: RatingDataset) -> float:
    """Root mean squared prediction error over the test triples.

    ``predict`` maps ``(user_id, item_id)`` to a predicted rating; pass a
    trained model's ``predict`` method.
    """
    if not testset.triples:
        raise ValueError("empty test set")
    total = 0.0
    for user, item, rating in testset.triples:
        err = predict(user, item) - rating
        total += err * err
    return float(np.sqrt(total / len(testset.triples)))
