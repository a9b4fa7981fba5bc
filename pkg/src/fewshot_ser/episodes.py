"""Meta-task and target-task construction.

Episodes are N+F-way: N freshly sampled emotion classes get a random
permutation of the leading output slots, while the F fixed classes
(silence, neutral) keep a constant tail-slot order across every episode,
target task, and run. Fixed-class clips never enter a support set; every
meta-task query set contains all fixed classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from .audio import FeatureClip
from .synth import FIXED_LABELS


class SamplingError(ValueError):
    """Not enough clips (or labels) to build the requested episode."""


class RegistryError(ValueError):
    """Malformed corpus handed to the registry."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_new: int = 5
    n_fixed: int = 2
    k_shot: int = 5
    q_new: int = 5
    q_fixed: int = 5

    def __post_init__(self):
        if self.n_fixed < 0:
            raise ValueError("n_fixed must be >= 0")
        if self.n_fixed == 0 and self.n_new < 2:
            raise ValueError("need n_new >= 2 when there are no fixed classes")
        for name in ("n_new", "k_shot", "q_new"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_fixed > 0 and self.q_fixed < 1:
            raise ValueError("q_fixed must be >= 1 when n_fixed > 0")
        if self.n_fixed > len(FIXED_LABELS):
            raise ValueError(f"at most {len(FIXED_LABELS)} fixed classes available")

    @property
    def n_way(self) -> int:
        return self.n_new + self.n_fixed


def fixed_tail_slot_map(new_labels, slot_perm, n_fixed) -> dict:
    """label -> output slot; fixed labels pinned to the constant tail order."""
    n_new = len(new_labels)
    slot_map = {lab: int(slot_perm[i]) for i, lab in enumerate(new_labels)}
    for j, lab in enumerate(FIXED_LABELS[:n_fixed]):
        slot_map[lab] = n_new + j
    _check_slot_map(slot_map, n_new, n_fixed)
    return slot_map


def _check_slot_map(slot_map, n_new, n_fixed):
    total = n_new + n_fixed
    if sorted(slot_map.values()) != list(range(total)):
        raise ValueError("slot map must be a bijection onto 0..N+F-1")
    for j, lab in enumerate(FIXED_LABELS[:n_fixed]):
        if slot_map[lab] != n_new + j:
            raise ValueError("fixed labels must occupy the constant tail slots")


@dataclass
class Episode:
    support: list  # (FeatureClip, slot)
    query: list  # (FeatureClip, slot)
    slot_map: dict
    language: str
    episode_id: int = 0


class DatasetRegistry:
    """Immutable (language, label) index over feature clips.

    Fixed-class clips live in a shared pool regardless of the language tag
    they were created with. Language reads are recorded in
    `accessed_languages` so a harness can audit train/test isolation.
    """

    def __init__(self, clips):
        clips = list(clips)
        if not clips:
            raise RegistryError("empty corpus")
        seen = set()
        self._index: dict = {}
        self._fixed: dict = {lab: [] for lab in FIXED_LABELS}
        for clip in clips:
            if clip.source_id in seen:
                raise RegistryError(f"duplicate source_id {clip.source_id!r}")
            seen.add(clip.source_id)
            if clip.emotion in FIXED_LABELS:
                self._fixed[clip.emotion].append(clip)
            else:
                self._index.setdefault(clip.language, {}).setdefault(
                    clip.emotion, []
                ).append(clip)
        self.accessed_languages: set = set()

    def languages(self):
        return sorted(self._index)

    def emotion_labels(self, language):
        return sorted(self._index.get(language, {}))

    def fixed_labels(self):
        return [lab for lab in FIXED_LABELS if self._fixed[lab]]

    def count(self, language, label):
        if label in FIXED_LABELS:
            return len(self._fixed[label])
        return len(self._index.get(language, {}).get(label, []))

    def clips_for(self, language, label):
        if label in FIXED_LABELS:
            return self._fixed[label]
        self.accessed_languages.add(language)
        return self._index.get(language, {}).get(label, [])

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        ids = sorted(
            [
                (c.source_id, c.language, c.emotion)
                for lang in self._index.values()
                for cs in lang.values()
                for c in cs
            ]
            + [(c.source_id, c.language, c.emotion) for cs in self._fixed.values() for c in cs]
        )
        for sid, lang, emo in ids:
            h.update(f"{sid}|{lang}|{emo}\n".encode())
        return h.hexdigest()[:16]


def _draw_clips(rng, pool, n, tag):
    if len(pool) < n:
        raise SamplingError(f"need {n} clips for {tag}, have {len(pool)}")
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def sample_meta_task(
    reg: DatasetRegistry,
    spec: EpisodeSpec,
    languages,
    rng: np.random.Generator,
    episode_id: int = 0,
    fixed_as_ordinary: bool = False,
) -> Episode:
    """One language-homogeneous meta-task.

    With fixed_as_ordinary=True the episode is a plain (N+F)-way task: the
    fixed labels join the sampling pool, may enter the support set, and get
    random slots like any other label (the plain-MAML baseline framing).
    """
    languages = sorted(languages)
    if not languages:
        raise SamplingError("no source languages")
    language = languages[int(rng.integers(len(languages)))]

    per_label = spec.k_shot + spec.q_new
    if fixed_as_ordinary:
        n_way = spec.n_way
        pool_labels = [
            lab
            for lab in reg.emotion_labels(language) + list(reg.fixed_labels())
            if reg.count(language, lab) >= per_label
        ]
        if len(pool_labels) < n_way:
            raise SamplingError(
                f"language {language!r} has {len(pool_labels)} usable labels, need {n_way}"
            )
        idx = rng.choice(len(pool_labels), size=n_way, replace=False)
        chosen = [pool_labels[i] for i in sorted(idx)]
        perm = rng.permutation(n_way)
        slot_map = {lab: int(perm[i]) for i, lab in enumerate(chosen)}
        new_labels, fixed_labels = chosen, []
    else:
        usable = [
            lab
            for lab in reg.emotion_labels(language)
            if reg.count(language, lab) >= per_label
        ]
        if len(usable) < spec.n_new:
            raise SamplingError(
                f"language {language!r} has {len(usable)} usable emotions, need {spec.n_new}"
            )
        idx = rng.choice(len(usable), size=spec.n_new, replace=False)
        new_labels = [usable[i] for i in sorted(idx)]
        fixed_labels = list(FIXED_LABELS[: spec.n_fixed])
        for lab in fixed_labels:
            if reg.count(language, lab) < spec.q_fixed:
                raise SamplingError(f"fixed class {lab!r} has too few clips")
        slot_map = fixed_tail_slot_map(new_labels, rng.permutation(spec.n_new), spec.n_fixed)

    support, query = [], []
    for lab in new_labels:
        drawn = _draw_clips(rng, reg.clips_for(language, lab), per_label, lab)
        support += [(c, slot_map[lab]) for c in drawn[: spec.k_shot]]
        query += [(c, slot_map[lab]) for c in drawn[spec.k_shot :]]
    for lab in fixed_labels:
        drawn = _draw_clips(rng, reg.clips_for(language, lab), spec.q_fixed, lab)
        query += [(c, slot_map[lab]) for c in drawn]
    _assert_disjoint(support, query)
    return Episode(support, query, slot_map, language, episode_id)


def build_target_task(
    reg: DatasetRegistry,
    spec: EpisodeSpec,
    target_language: str,
    eval_per_label: int,
    rng: np.random.Generator,
    fixed_in_support: bool = False,
):
    """(support, eval_query, slot_map) for the held-out language.

    Support: k_shot clips per new emotion; fixed classes stay out of it
    unless fixed_in_support is set (the plain N+F-way baseline framing,
    where they are ordinary classes and adapt like any other). The
    evaluation query has eval_per_label clips per label including the fixed
    classes, disjoint from support. The slot map keeps the constant
    fixed-tail order used during meta-training.
    """
    need = spec.k_shot + eval_per_label
    usable = [
        lab
        for lab in reg.emotion_labels(target_language)
        if reg.count(target_language, lab) >= need
    ]
    if len(usable) < spec.n_new:
        raise SamplingError(
            f"target language {target_language!r}: {len(usable)} labels have the "
            f"required {need} clips, need {spec.n_new} labels"
        )
    idx = rng.choice(len(usable), size=spec.n_new, replace=False)
    new_labels = [usable[i] for i in sorted(idx)]
    fixed_labels = list(FIXED_LABELS[: spec.n_fixed])
    slot_map = fixed_tail_slot_map(new_labels, rng.permutation(spec.n_new), spec.n_fixed)

    support, eval_query = [], []
    for lab in new_labels:
        drawn = _draw_clips(rng, reg.clips_for(target_language, lab), need, lab)
        support += [(c, slot_map[lab]) for c in drawn[: spec.k_shot]]
        eval_query += [(c, slot_map[lab]) for c in drawn[spec.k_shot :]]
    for lab in fixed_labels:
        n_fix = eval_per_label + (spec.k_shot if fixed_in_support else 0)
        drawn = _draw_clips(rng, reg.clips_for(target_language, lab), n_fix, lab)
        if fixed_in_support:
            support += [(c, slot_map[lab]) for c in drawn[: spec.k_shot]]
            drawn = drawn[spec.k_shot :]
        eval_query += [(c, slot_map[lab]) for c in drawn]
    _assert_disjoint(support, eval_query)
    return support, eval_query, slot_map


def _assert_disjoint(support, query):
    s = {c.source_id for c, _ in support}
    q = {c.source_id for c, _ in query}
    if s & q:
        raise SamplingError(f"support/query overlap: {sorted(s & q)[:3]}")


def episode_records(episode: Episode):
    """Audit records, one per clip."""
    recs = []
    for role, items in (("support", episode.support), ("query", episode.query)):
        for clip, slot in items:
            recs.append(
                {
                    "source_id": clip.source_id,
                    "role": role,
                    "slot": slot,
                    "episode_id": episode.episode_id,
                }
            )
    return recs


def export_manifest(episodes, path) -> None:
    """Line-delimited JSON manifest of episode membership."""
    with open(path, "w") as fh:
        for ep in episodes:
            for rec in episode_records(ep):
                fh.write(json.dumps(rec) + "\n")
