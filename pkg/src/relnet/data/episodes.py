"""C-way K-shot episode specifications and sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relnet.data.images import ClassIndexedDataset, DataError


@dataclass(frozen=True)
class EpisodeSpec:
    """``ways`` classes, ``shots`` support items and ``queries`` query items per class."""

    ways: int
    shots: int
    queries: int
    stream: int = 0

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError(f"an episode needs at least 2 classes, got {self.ways}")
        if self.shots < 1 or self.queries < 1:
            raise ValueError(f"shots and queries must be >= 1, got {self.shots} and {self.queries}")

    @property
    def n_support(self) -> int:
        return self.ways * self.shots

    @property
    def n_query(self) -> int:
        return self.ways * self.queries

    @property
    def n_images(self) -> int:
        return self.n_support + self.n_query

    @classmethod
    def preset(cls, name: str) -> "EpisodeSpec":
        try:
            return cls(*PRESETS[name])
        except KeyError:
            raise KeyError(f"unknown episode preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


# training compositions; the "-alt" miniImageNet entries use 1 query for
# 1-shot and 5 for 5-shot, the other count reported for the same runs
PRESETS = {
    "omniglot-5w1s": (5, 1, 19),
    "omniglot-5w5s": (5, 5, 15),
    "omniglot-20w1s": (20, 1, 10),
    "omniglot-20w5s": (20, 5, 5),
    "mini-5w1s": (5, 1, 15),
    "mini-5w5s": (5, 5, 10),
    "mini-5w1s-alt": (5, 1, 1),
    "mini-5w5s-alt": (5, 5, 5),
}



def eval_queries(family: str, shots: int) -> int:
    """Test-time queries per class: as many as shots for Omniglot, 15 for miniImageNet."""
    if family == "omniglot":
        return shots
    if family in ("mini", "miniimagenet"):
        return 15
    raise ValueError(f"unknown dataset family {family!r}")


@dataclass
class Episode:
    """One sampled task: a labelled support set and a labelled query set.

    Item refs are ``(class_id, item_index)`` pairs into the source dataset.
    """

    class_ids: list
    support_refs: list
    support_labels: list
    support_images: np.ndarray
    query_refs: list
    query_labels: list
    query_images: np.ndarray

    @property
    def n_images(self) -> int:
        return len(self.support_refs) + len(self.query_refs)


def sample_episode(ds: ClassIndexedDataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw ``ways`` classes, then ``shots + queries`` distinct items from each.

    The first ``shots`` items of every class form the support set and the
    remaining ``queries`` the query set.  All draws come from ``rng``, so a
    seeded generator yields a reproducible stream.
    """
    need = spec.shots + spec.queries
    short = [c for c in ds.class_ids if len(ds.classes[c]) < need]
    if short:
        listed = ", ".join(f"{c} ({len(ds.classes[c])})" for c in short[:10])
        more = f" and {len(short) - 10} more" if len(short) > 10 else ""
        raise DataError(f"classes with fewer than {need} items: {listed}{more}")
    ids = ds.class_ids
    if len(ids) < spec.ways:
        raise DataError(f"{spec.ways}-way episodes need {spec.ways} classes, dataset has {len(ids)}")
    chosen = [ids[i] for i in rng.choice(len(ids), size=spec.ways, replace=False)]
    s_refs, q_refs = [], []
    for cid in chosen:
        picks = rng.choice(len(ds.classes[cid]), size=need, replace=False)
        s_refs.extend((cid, int(i)) for i in picks[: spec.shots])
        q_refs.extend((cid, int(i)) for i in picks[spec.shots:])

    def gather(refs):
        return np.stack([ds.classes[c][i] for c, i in refs])

    return Episode(
        class_ids=chosen,
        support_refs=s_refs,
        support_labels=[c for c, _ in s_refs],
        support_images=gather(s_refs),
        query_refs=q_refs,
        query_labels=[c for c, _ in q_refs],
        query_images=gather(q_refs),
    )
