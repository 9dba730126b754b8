"""Desk-scale synthetic MOS corpora.

Each system has a latent quality ``q ~ U(1, 5)``. An utterance's label is
``clamp(q + noise * N(0, 1), 1, 5)`` and its features are a fixed random
linear encoding of ``(q - 3, jitter)`` where ``jitter ~ N(0, I) / 2`` is
per-utterance nuisance. Held-out splits share the encoding and use new
systems.

Corrupted records (training split only) get their label replaced by
``clamp(q + 3, 1, 5)``. They are drawn from systems with ``q <= 2`` so the
shift is not absorbed by the clamp, falling back to the lowest-quality
records when there are too few of those.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import MOS_HIGH, MOS_LOW, Dataset, make_dataset

JITTER_DIM = 3


@dataclass
class SynthCorpus:
    splits: dict[str, Dataset]
    corrupted: list[str] = field(default_factory=list)
    quality: dict[str, float] = field(default_factory=dict)


def _split(
    name: str,
    system_offset: int,
    n_systems: int,
    utts: int,
    encoding: np.ndarray,
    noise: float,
    rng: np.random.Generator,
):
    ids, systems, feats, mos, q_of = [], [], [], [], {}
    for s in range(system_offset, system_offset + n_systems):
        sid = f"sys{s:03d}"
        q = float(rng.uniform(MOS_LOW, MOS_HIGH))
        q_of[sid] = q
        for u in range(utts):
            latent = np.concatenate([[q - 3.0], 0.5 * rng.standard_normal(JITTER_DIM)])
            ids.append(f"{sid}-utt{u:03d}")
            systems.append(sid)
            feats.append(encoding @ latent)
            label = q + noise * rng.standard_normal() if noise > 0 else q
            mos.append(float(np.clip(label, MOS_LOW, MOS_HIGH)))
    return ids, systems, np.array(feats), mos, q_of


def generate(
    n_systems: int,
    utts_per_system: int,
    feature_dim: int,
    noise: float,
    corrupt: int,
    seed: int,
    dev_systems: int = 0,
    test_systems: int = 0,
) -> SynthCorpus:
    if min(n_systems, utts_per_system, feature_dim) < 1:
        raise ValueError("n_systems, utts_per_system and feature_dim must be >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if corrupt < 0 or corrupt > n_systems * utts_per_system:
        raise ValueError("corrupt must lie in [0, number of training records]")
    root = np.random.SeedSequence(seed)
    enc_ss, train_ss, dev_ss, test_ss, corrupt_ss = root.spawn(5)
    encoding = np.random.default_rng(enc_ss).standard_normal((feature_dim, 1 + JITTER_DIM))

    corpus = SynthCorpus({})
    offset = 0
    for name, count, ss in (("train", n_systems, train_ss), ("dev", dev_systems, dev_ss), ("test", test_systems, test_ss)):
        if count == 0:
            continue
        ids, systems, feats, mos, q_of = _split(
            name, offset, count, utts_per_system, encoding, noise, np.random.default_rng(ss)
        )
        offset += count
        corpus.quality.update(q_of)
        if name == "train" and corrupt:
            q = np.array([q_of[s] for s in systems])
            pool = np.flatnonzero(q <= 2.0)
            if pool.size < corrupt:
                pool = np.argsort(q, kind="stable")[: max(corrupt, pool.size)]
            picked = np.sort(np.random.default_rng(corrupt_ss).choice(pool, corrupt, replace=False))
            for i in picked:
                mos[i] = float(np.clip(q[i] + 3.0, MOS_LOW, MOS_HIGH))
            corpus.corrupted = [ids[i] for i in picked]
        corpus.splits[name] = make_dataset(ids, systems, feats, mos, name)
    return corpus
