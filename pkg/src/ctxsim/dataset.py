"""8-choose-2 trial records and their expansion into triplet-with-context trials.

Trials file: line-delimited JSON, one object per line with keys
trial_id, participant_id, query_id, reference_ids (8), selected_ids (2).

Triplets file: line-delimited JSON with keys context_id, image_ids (3),
oddball_index, source_trial_id, participant_id, split.

Class map: JSON object mapping image-ID string to an integer label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .config import DEFAULTS
from .errors import ParseError, ValidationError

SPLIT_TAGS = ("train", "val", "test")
_U64_MAX = 2**64 - 1


def _check_u64(value, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= _U64_MAX:
        raise ValidationError(f"{name} must be an unsigned 64-bit integer, got {value!r}")
    return value


@dataclass(frozen=True)
class TrialRecord:
    """One 8-choose-2 judgment: pick the 2 of 8 references most similar to the query."""

    trial_id: int
    participant_id: int
    query_id: int
    reference_ids: tuple[int, ...]
    selected_ids: tuple[int, int]

    def __post_init__(self):
        _check_u64(self.trial_id, "trial_id")
        _check_u64(self.participant_id, "participant_id")
        _check_u64(self.query_id, "query_id")
        if len(self.reference_ids) != 8:
            raise ValidationError(f"expected 8 reference_ids, got {len(self.reference_ids)}")
        if len(set(self.reference_ids)) != 8:
            raise ValidationError("reference_ids must be distinct")
        if len(self.selected_ids) != 2 or len(set(self.selected_ids)) != 2:
            raise ValidationError("selected_ids must be 2 distinct IDs")
        for i in self.reference_ids:
            _check_u64(i, "reference id")
        if not set(self.selected_ids) <= set(self.reference_ids):
            raise ValidationError("selected_ids must be a subset of reference_ids")
        if self.query_id in self.reference_ids:
            raise ValidationError("query_id must not appear among reference_ids")


@dataclass(frozen=True)
class ContextTriplet:
    """One derived trial: three images, a context image, and the human oddball position."""

    context_id: int
    image_ids: tuple[int, int, int]
    oddball_index: int
    source_trial_id: int
    participant_id: int
    split: str | None = None

    def __post_init__(self):
        _check_u64(self.context_id, "context_id")
        _check_u64(self.source_trial_id, "source_trial_id")
        _check_u64(self.participant_id, "participant_id")
        if len(self.image_ids) != 3 or len(set(self.image_ids)) != 3:
            raise ValidationError("image_ids must be 3 distinct IDs")
        if self.oddball_index not in (0, 1, 2):
            raise ValidationError(f"oddball_index must be in {{0,1,2}}, got {self.oddball_index}")
        if self.split is not None and self.split not in SPLIT_TAGS:
            raise ValidationError(f"split must be one of {SPLIT_TAGS}, got {self.split!r}")


def parse_trials(path) -> list[TrialRecord]:
    """Read and validate a line-delimited JSON trials file."""
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from None
            try:
                trials.append(
                    TrialRecord(
                        trial_id=obj["trial_id"],
                        participant_id=obj["participant_id"],
                        query_id=obj["query_id"],
                        reference_ids=tuple(obj["reference_ids"]),
                        selected_ids=tuple(obj["selected_ids"]),
                    )
                )
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", line=lineno) from None
            except (ValidationError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from None
    return trials


def write_trials(trials: list[TrialRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(
                json.dumps(
                    {
                        "trial_id": t.trial_id,
                        "participant_id": t.participant_id,
                        "query_id": t.query_id,
                        "reference_ids": list(t.reference_ids),
                        "selected_ids": list(t.selected_ids),
                    }
                )
                + "\n"
            )


def parse_triplets(path) -> list[ContextTriplet]:
    """Read and validate a line-delimited JSON triplets file."""
    triplets = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from None
            try:
                triplets.append(
                    ContextTriplet(
                        context_id=obj["context_id"],
                        image_ids=tuple(obj["image_ids"]),
                        oddball_index=obj["oddball_index"],
                        source_trial_id=obj["source_trial_id"],
                        participant_id=obj["participant_id"],
                        split=obj.get("split"),
                    )
                )
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", line=lineno) from None
            except (ValidationError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from None
    return triplets


def write_triplets(triplets: list[ContextTriplet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            obj = {
                "context_id": t.context_id,
                "image_ids": list(t.image_ids),
                "oddball_index": t.oddball_index,
                "source_trial_id": t.source_trial_id,
                "participant_id": t.participant_id,
            }
            if t.split is not None:
                obj["split"] = t.split
            fh.write(json.dumps(obj) + "\n")


def load_class_map(path) -> dict[int, int]:
    """Read a JSON object mapping image-ID strings to integer class labels."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValidationError("class map must be a JSON object")
    return {int(k): int(v) for k, v in raw.items()}


def write_class_map(classes: dict[int, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({str(k): int(v) for k, v in sorted(classes.items())}, fh)
        fh.write("\n")


def expand_to_triplets(trial: TrialRecord, split: str | None = None) -> list[ContextTriplet]:
    """Expand one 8-choose-2 trial into its 6 triplet-with-context trials.

    Each triplet pairs the two selected references with one unselected
    reference; the unselected image is the oddball.  Canonical image order
    is (selected, selected, unselected), so oddball_index is always 2 here.
    """
    sel = trial.selected_ids
    unselected = [u for u in trial.reference_ids if u not in sel]
    return [
        ContextTriplet(
            context_id=trial.query_id,
            image_ids=(sel[0], sel[1], u),
            oddball_index=2,
            source_trial_id=trial.trial_id,
            participant_id=trial.participant_id,
            split=split,
        )
        for u in unselected
    ]


def permute_triplets(triplets: list[ContextTriplet], seed: int) -> list[ContextTriplet]:
    """Apply a seeded random permutation to each triplet's image order.

    The oddball index is remapped along with the images, so the trial's
    meaning is unchanged.  Used to audit that models are order-invariant.
    """
    rng = np.random.default_rng(seed)
    out = []
    for t in triplets:
        perm = rng.permutation(3)
        images = tuple(t.image_ids[k] for k in perm)
        oddball = int(np.nonzero(perm == t.oddball_index)[0][0])
        out.append(replace(t, image_ids=images, oddball_index=oddball))
    return out


def filter_class_collisions(
    triplets: list[ContextTriplet], classes: dict[int, int]
) -> list[ContextTriplet]:
    """Keep only triplets whose three images have pairwise-distinct class labels."""
    kept = []
    for t in triplets:
        try:
            labels = [classes[i] for i in t.image_ids]
        except KeyError as exc:
            raise ValidationError(f"image ID {exc.args[0]} missing from class map") from None
        if len(set(labels)) == 3:
            kept.append(t)
    return kept


def stratified_split_ids(
    items: list[tuple[int, int]],
    ratios: tuple[float, float, float],
    seed: int,
) -> dict[int, str]:
    """Assign (trial_id, participant_id) pairs to train/val/test per participant.

    Within each participant the trial list is shuffled with a seed derived
    from (seed, participant_id), counts follow the ratios with floor
    rounding, and remainder trials go to train, then val, then test.
    """
    if not items:
        raise ValidationError("no trials to split")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError("ratios must be 3 positive reals")
    if abs(sum(ratios) - 1.0) > DEFAULTS.ratio_sum_tol:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    seen = set()
    by_participant: dict[int, list[int]] = {}
    for trial_id, participant_id in items:
        if trial_id in seen:
            raise ValidationError(f"duplicate trial_id {trial_id}")
        seen.add(trial_id)
        by_participant.setdefault(participant_id, []).append(trial_id)

    assignment: dict[int, str] = {}
    for participant_id, trial_ids in by_participant.items():
        rng = np.random.default_rng([seed, participant_id])
        order = rng.permutation(len(trial_ids))
        n = len(trial_ids)
        counts = [int(np.floor(n * r)) for r in ratios]
        for k in range(n - sum(counts)):
            counts[k % 3] += 1
        tags = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
        for pos, tag in zip(order, tags):
            assignment[trial_ids[pos]] = tag
    return assignment


def stratified_split(
    trials: list[TrialRecord],
    ratios: tuple[float, float, float],
    seed: int,
) -> dict[int, str]:
    """Participant-stratified split of 8-choose-2 trials into train/val/test."""
    return stratified_split_ids([(t.trial_id, t.participant_id) for t in trials], ratios, seed)


def apply_split(triplets: list[ContextTriplet], assignment: dict[int, str]) -> list[ContextTriplet]:
    """Stamp each triplet with its source trial's split tag."""
    out = []
    for t in triplets:
        if t.source_trial_id not in assignment:
            raise ValidationError(f"trial {t.source_trial_id} has no split assignment")
        out.append(replace(t, split=assignment[t.source_trial_id]))
    return out
