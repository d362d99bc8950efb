"""Corpus schema, loading/validation, splits, and training-batch sampling.

On-disk layout of a corpus directory:

    manifest.json            target entity, neighbor list, seeds, split options
    forget.jsonl             one QA record per line for the target entity
    retain_<entity>.jsonl    one file per neighboring entity
    world.jsonl              multiple-choice world records

All record types are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .errors import CorpusLoadError, IntegrityError
from .util import stable_digest

N_PERTURBATIONS = 5

DEFAULT_SPLIT_RATIOS = (8, 1, 1)


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace; used for record identity."""
    return re.sub(r"\s+", " ", text.strip()).lower()


def _require_text(value, name: str) -> str:
    if not isinstance(value, str) or not normalize_text(value):
        raise ValueError(f"{name} must be non-empty text, got {value!r}")
    return value


@dataclass(frozen=True)
class QARecord:
    """A question/answer pair plus the evaluation companions.

    ``paraphrased_answer`` and ``perturbed_answers`` are only needed by the
    truth-ratio metric and may be absent on raw generated records;
    ``perturbed_answers`` must contain exactly five wrong answers when present.
    """

    question: str
    answer: str
    paraphrased_answer: str | None = None
    perturbed_answers: tuple[str, ...] | None = None
    idk_answer: str | None = None
    source_passage_id: str = ""

    def __post_init__(self):
        _require_text(self.question, "question")
        _require_text(self.answer, "answer")
        if self.perturbed_answers is not None:
            object.__setattr__(self, "perturbed_answers", tuple(self.perturbed_answers))
            if len(self.perturbed_answers) != N_PERTURBATIONS:
                raise ValueError(
                    f"perturbed_answers must have exactly {N_PERTURBATIONS} entries, "
                    f"got {len(self.perturbed_answers)}"
                )

    @property
    def key(self) -> tuple[str, str]:
        """Normalized (question, answer) identity used for disjointness checks."""
        return (normalize_text(self.question), normalize_text(self.answer))

    def to_dict(self) -> dict:
        d = {
            "question": self.question,
            "answer": self.answer,
            "source_passage_id": self.source_passage_id,
        }
        if self.paraphrased_answer is not None:
            d["paraphrased_answer"] = self.paraphrased_answer
        if self.perturbed_answers is not None:
            d["perturbed_answers"] = list(self.perturbed_answers)
        if self.idk_answer is not None:
            d["idk_answer"] = self.idk_answer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QARecord":
        perturbed = d.get("perturbed_answers")
        return cls(
            question=d["question"],
            answer=d["answer"],
            paraphrased_answer=d.get("paraphrased_answer"),
            perturbed_answers=tuple(perturbed) if perturbed is not None else None,
            idk_answer=d.get("idk_answer"),
            source_passage_id=d.get("source_passage_id", ""),
        )


@dataclass(frozen=True)
class WorldRecord:
    """A multiple-choice general-knowledge record (auxiliary retain data)."""

    question: str
    choices: tuple[str, ...]
    correct_index: int
    paraphrased_answer: str
    perturbed_answers: tuple[str, ...]

    def __post_init__(self):
        _require_text(self.question, "question")
        object.__setattr__(self, "choices", tuple(self.choices))
        object.__setattr__(self, "perturbed_answers", tuple(self.perturbed_answers))
        if len(self.choices) < 2:
            raise ValueError("world record needs at least 2 choices")
        if len(set(self.choices)) != len(self.choices):
            raise ValueError("world record choices must be pairwise distinct")
        if not 0 <= self.correct_index < len(self.choices):
            raise ValueError(
                f"correct_index {self.correct_index} out of range for {len(self.choices)} choices"
            )
        if len(self.perturbed_answers) != N_PERTURBATIONS:
            raise ValueError(
                f"perturbed_answers must have exactly {N_PERTURBATIONS} entries"
            )

    @property
    def answer(self) -> str:
        return self.choices[self.correct_index]

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "choices": list(self.choices),
            "correct_index": self.correct_index,
            "paraphrased_answer": self.paraphrased_answer,
            "perturbed_answers": list(self.perturbed_answers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldRecord":
        return cls(
            question=d["question"],
            choices=tuple(d["choices"]),
            correct_index=d["correct_index"],
            paraphrased_answer=d["paraphrased_answer"],
            perturbed_answers=tuple(d["perturbed_answers"]),
        )


@dataclass(frozen=True)
class SplitSet:
    """A train/valid/test partition of records."""

    train: tuple
    valid: tuple
    test: tuple

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "valid", tuple(self.valid))
        object.__setattr__(self, "test", tuple(self.test))

    @property
    def all(self) -> tuple:
        return self.train + self.valid + self.test

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.valid), len(self.test))


@dataclass(frozen=True)
class EntityRef:
    name: str
    entity_id: str


@dataclass(frozen=True)
class EntityBundle:
    """A target entity's proxy forget set plus neighbor/world retain data."""

    target: EntityRef
    forget_set: tuple[QARecord, ...]
    neighbor_entities: tuple[tuple[str, tuple[QARecord, ...]], ...]
    retain_splits: SplitSet
    world_splits: SplitSet
    split_seed: int = 0
    per_entity_split: bool = False

    def __post_init__(self):
        object.__setattr__(self, "forget_set", tuple(self.forget_set))
        object.__setattr__(
            self,
            "neighbor_entities",
            tuple((name, tuple(recs)) for name, recs in self.neighbor_entities),
        )
        validate_bundle(self)

    @property
    def retain_records(self) -> tuple[QARecord, ...]:
        return tuple(r for _, recs in self.neighbor_entities for r in recs)

    def corpus_hash(self) -> str:
        """Content hash over every record, independent of file layout."""
        return stable_digest(
            self.target,
            [r.to_dict() for r in self.forget_set],
            [(n, [r.to_dict() for r in recs]) for n, recs in self.neighbor_entities],
            [r.to_dict() for r in self.world_splits.all],
            self.split_seed,
            self.per_entity_split,
        )


def validate_bundle(bundle: EntityBundle) -> None:
    if not bundle.forget_set:
        raise IntegrityError("forget set empty")
    forget_keys = {r.key for r in bundle.forget_set}
    retain_keys = {}
    for name, recs in bundle.neighbor_entities:
        for r in recs:
            if r.key in forget_keys:
                raise IntegrityError(
                    f"record {r.key!r} appears in both forget set and retain set ({name})"
                )
            retain_keys[r.key] = name
    _check_partition(bundle.retain_splits, bundle.retain_records, "retain")
    _check_partition(bundle.world_splits, bundle.world_splits.all, "world")
    n = len(bundle.retain_records)
    if not bundle.per_entity_split and n >= sum(DEFAULT_SPLIT_RATIOS):
        sizes = bundle.retain_splits.sizes()
        expect_valid = n // 10
        expect_test = n // 10
        if abs(sizes[1] - expect_valid) > 1 or abs(sizes[2] - expect_test) > 1:
            raise IntegrityError(
                f"retain splits {sizes} deviate from the 8:1:1 ratio for {n} records"
            )


def _check_partition(splits: SplitSet, universe: Sequence, label: str) -> None:
    if sorted(repr(r) for r in splits.all) != sorted(repr(r) for r in universe):
        raise IntegrityError(f"{label} splits are not a partition of the record set")


def make_splits(records: Sequence, ratios=DEFAULT_SPLIT_RATIOS, seed: int = 0) -> SplitSet:
    """Deterministically shuffle and partition records.

    Non-train shares get the floor of their proportional size; leftover
    records go to the train split.  Records are put in a canonical order
    before shuffling, so the partition depends only on (content, seed) and
    corpus files can be rewritten in any order without moving records
    between splits.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot split an empty record list")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if len(records) < len(ratios):
        raise ValueError(
            f"need at least {len(ratios)} records to split, got {len(records)}"
        )
    total = sum(ratios)
    n = len(records)
    n_valid = int(n * ratios[1] // total)
    n_test = int(n * ratios[2] // total)
    canonical = sorted(records, key=repr)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    shuffled = [canonical[i] for i in order]
    n_train = n - n_valid - n_test
    return SplitSet(
        train=shuffled[:n_train],
        valid=shuffled[n_train : n_train + n_valid],
        test=shuffled[n_train + n_valid :],
    )


def sample_retain_batchset(bundle: EntityBundle, k_ratio: float, seed: int) -> list[QARecord]:
    """Sample ceil(k_ratio * |forget|) retain-train records for one epoch.

    Sampling is without replacement while the pool is large enough and falls
    back to with-replacement otherwise.
    """
    if k_ratio <= 0:
        raise ValueError(f"k_ratio must be positive, got {k_ratio}")
    pool = list(bundle.retain_splits.train)
    if not pool:
        raise ValueError("retain-train pool is empty")
    k = math.ceil(k_ratio * len(bundle.forget_set))
    rng = random.Random(seed)
    if k <= len(pool):
        return rng.sample(pool, k)
    return rng.choices(pool, k=k)


def substitute_idk_answers(
    records: Sequence[QARecord], idk_pool: Sequence[str], seed: int
) -> list[QARecord]:
    """Replace each answer with a pool response, deterministic per (record, seed)."""
    if not idk_pool:
        raise ValueError("idk pool is empty")
    out = []
    for rec in records:
        idx = int(stable_digest(seed, normalize_text(rec.question))[:15], 16) % len(idk_pool)
        out.append(replace(rec, answer=idk_pool[idx], idk_answer=idk_pool[idx]))
    return out


# --------------------------------------------------------------------------
# Corpus directory IO


def entity_slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def _read_jsonl(path: Path, parser, min_records: int = 0):
    if not path.exists():
        raise CorpusLoadError("missing corpus file", path=str(path))
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(parser(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusLoadError(
                    f"bad record: {exc}", path=str(path), line=lineno
                ) from exc
    if len(records) < min_records:
        raise CorpusLoadError(
            f"{path.name} holds {len(records)} records, expected at least {min_records}",
            path=str(path),
        )
    return records


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> EntityBundle:
    """Load and validate a corpus directory into an EntityBundle."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorpusLoadError("missing manifest.json", path=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        target = EntityRef(
            name=manifest["target_entity"]["name"],
            entity_id=manifest["target_entity"]["id"],
        )
        neighbors = list(manifest["neighbors"])
        split_seed = int(manifest["seeds"]["split"])
        per_entity_split = bool(manifest.get("per_entity_split", False))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusLoadError(f"bad manifest: {exc}", path=str(manifest_path)) from exc

    forget = _read_jsonl(root / "forget.jsonl", QARecord.from_dict)
    if not forget:
        raise CorpusLoadError("forget set empty", path=str(root / "forget.jsonl"))
    neighbor_entities = []
    for name in neighbors:
        recs = _read_jsonl(root / f"retain_{entity_slug(name)}.jsonl", QARecord.from_dict)
        neighbor_entities.append((name, tuple(recs)))
    world = _read_jsonl(root / "world.jsonl", WorldRecord.from_dict, min_records=3)
    return build_bundle(
        target=target,
        forget=forget,
        neighbor_entities=neighbor_entities,
        world=world,
        split_seed=split_seed,
        per_entity_split=per_entity_split,
    )


def build_bundle(
    target: EntityRef,
    forget: Sequence[QARecord],
    neighbor_entities: Sequence[tuple[str, Sequence[QARecord]]],
    world: Sequence[WorldRecord],
    split_seed: int = 0,
    per_entity_split: bool = False,
) -> EntityBundle:
    """Assemble a bundle, computing retain/world splits from the seed."""
    neighbor_entities = [(n, tuple(r)) for n, r in neighbor_entities]
    if per_entity_split:
        trains, valids, tests = [], [], []
        for name, recs in neighbor_entities:
            s = make_splits(recs, seed=split_seed)
            trains.extend(s.train)
            valids.extend(s.valid)
            tests.extend(s.test)
        retain_splits = SplitSet(trains, valids, tests)
    else:
        pooled = [r for _, recs in neighbor_entities for r in recs]
        retain_splits = make_splits(pooled, seed=split_seed)
    world_splits = make_splits(list(world), seed=split_seed)
    return EntityBundle(
        target=target,
        forget_set=tuple(forget),
        neighbor_entities=tuple(neighbor_entities),
        retain_splits=retain_splits,
        world_splits=world_splits,
        split_seed=split_seed,
        per_entity_split=per_entity_split,
    )


def save_corpus(bundle: EntityBundle, path: str | Path) -> Path:
    """Write a bundle back to the on-disk layout; load(save(b)) == b."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "target_entity": {"name": bundle.target.name, "id": bundle.target.entity_id},
        "neighbors": [name for name, _ in bundle.neighbor_entities],
        "seeds": {"split": bundle.split_seed},
        "per_entity_split": bundle.per_entity_split,
        "counts": {
            "forget": len(bundle.forget_set),
            "retain": len(bundle.retain_records),
            "world": len(bundle.world_splits.all),
        },
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_jsonl(root / "forget.jsonl", bundle.forget_set)
    for name, recs in bundle.neighbor_entities:
        _write_jsonl(root / f"retain_{entity_slug(name)}.jsonl", recs)
    _write_jsonl(root / "world.jsonl", sorted(bundle.world_splits.all, key=repr))
    return root
