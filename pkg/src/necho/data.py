"""Synthetic multimodal EHR cohorts, preprocessing, splitting and batching.

Generative story (per patient, each with its own RNG stream derived from the
cohort seed and the patient index):

* 1-3 latent condition clusters are active; a cluster is one parent group of
  the ontology. Cluster choice is weighted by a global popularity and by the
  patient's age and gender, so demographics carry signal.
* Visit codes: each code of the previous visit persists with probability
  ``p_persist``; the visit is then filled up to a Poisson target size with
  codes from the active clusters (patient-specific propensities) and a few
  off-cluster comorbidities.
* Between visits a new cluster may emerge. The note of the visit *before*
  it emerges mentions symptom words of that condition (a vocabulary block of
  its own, never emitted for an established cluster), so notes carry signal
  about the next visit that the codes do not.
* Notes mix code-specific tokens (each code owns a small vocabulary block),
  cluster words, symptom words and uniform noise tokens. Only a few of a
  visit's codes are mentioned, so the notes cannot stand in for the codes.

Token ids: 0 is padding, 1 is unknown, then one block per leaf code, one
block of cluster words per parent, one block of symptom words per parent,
and the rest is noise vocabulary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ontology import Ontology, ancestor_label_vector, leaf_label_vector

PAD, UNK = 0, 1
MIN_VISITS = 2
MAX_VISITS = 21
W_MAX = 10000
MAX_CODES = 39
MIN_NOTE_PAD = 4  # widest note filter

# age, gender, admission type, admission location, discharge location, insurance
DEMO_SIZES = (73, 2, 3, 8, 16, 5)
DEMO_NAMES = ("age", "gender", "admission_type", "admission_location", "discharge_location", "insurance")
AGE_MIN = 18


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Visit:
    codes: tuple[int, ...]
    demographics: tuple[int, ...]
    note: tuple[int, ...]

    def to_json(self) -> dict:
        return {"codes": list(self.codes), "demo": list(self.demographics), "note": list(self.note)}

    @classmethod
    def from_json(cls, obj: dict) -> "Visit":
        return cls(tuple(int(c) for c in obj["codes"]), tuple(int(h) for h in obj["demo"]),
                   tuple(int(w) for w in obj["note"]))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def to_json(self) -> dict:
        return {"patient_id": self.patient_id, "visits": [v.to_json() for v in self.visits]}

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        return cls(str(obj["patient_id"]), tuple(Visit.from_json(v) for v in obj["visits"]))


@dataclass(frozen=True)
class GenParams:
    vocab_size: int = 2000
    tokens_per_code: int = 4
    tokens_per_parent: int = 6
    tokens_per_symptom: int = 3
    min_clusters: int = 1
    max_clusters: int = 3
    p_persist: float = 0.6
    codes_per_visit: float = 12.0  # Poisson mean of the visit size target (plus one)
    p_off_cluster: float = 0.05
    p_new_cluster: float = 0.45
    p_resolve: float = 0.1
    extra_visit_p: float = 0.45  # geometric success prob for visits beyond two
    p_mention: float = 0.15
    cluster_words: float = 0.3
    foreshadow_words: float = 6.0
    p_foreshadow: float = 0.85
    noise_words: float = 12.0
    demo_sizes: tuple = DEMO_SIZES

    def validate(self, ont: Ontology) -> None:
        reserved = 2 + ont.n_leaves * self.tokens_per_code + ont.n_parents * (self.tokens_per_parent
                                                                          + self.tokens_per_symptom)
        if self.vocab_size <= reserved:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no noise tokens "
                              f"({reserved} reserved for {ont.n_leaves} codes / {ont.n_parents} parents)")
        if not 1 <= self.min_clusters <= self.max_clusters <= ont.n_parents:
            raise ConfigError("cluster counts must satisfy 1 <= min <= max <= number of parents")
        if len(self.demo_sizes) != 6 or self.demo_sizes[0] > DEMO_SIZES[0]:
            raise ConfigError("demo_sizes must have 6 entries with at most 73 age buckets")
        for name in ("p_persist", "p_off_cluster", "p_new_cluster", "p_resolve", "p_mention", "p_foreshadow"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if not 0.0 < self.extra_visit_p <= 1.0:
            raise ConfigError("extra_visit_p must be in (0, 1]")


@dataclass(frozen=True)
class _World:
    """Cohort-level constants shared by every patient."""

    popularity: np.ndarray  # per parent
    age_affinity: np.ndarray  # per parent
    gender_affinity: np.ndarray  # per parent
    leaf_weight: np.ndarray  # per leaf
    leaf_block: np.ndarray  # first token id of each leaf's block
    parent_block: np.ndarray
    symptom_block: np.ndarray
    noise_start: int


def _world(seed: int, ont: Ontology, gp: GenParams) -> _World:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
    popularity = 1.0 / np.arange(1, ont.n_parents + 1) ** 0.6
    popularity = popularity[rng.permutation(ont.n_parents)]
    leaf_block = 2 + np.arange(ont.n_leaves) * gp.tokens_per_code
    parent_start = 2 + ont.n_leaves * gp.tokens_per_code
    parent_block = parent_start + np.arange(ont.n_parents) * gp.tokens_per_parent
    symptom_start = parent_start + ont.n_parents * gp.tokens_per_parent
    symptom_block = symptom_start + np.arange(ont.n_parents) * gp.tokens_per_symptom
    return _World(
        popularity=popularity / popularity.sum(),
        age_affinity=rng.uniform(-1.5, 1.5, ont.n_parents),
        gender_affinity=rng.uniform(-0.7, 0.7, ont.n_parents),
        leaf_weight=rng.gamma(2.0, 1.0, ont.n_leaves),
        leaf_block=leaf_block,
        parent_block=parent_block,
        symptom_block=symptom_block,
        noise_start=symptom_start + ont.n_parents * gp.tokens_per_symptom,
    )


def _cluster_weights(world: _World, age: int, gender: int, exclude: Iterable[int]) -> np.ndarray:
    z = (age - 54.0) / 18.0
    w = world.popularity * np.exp(world.age_affinity * z + world.gender_affinity * (2 * gender - 1))
    for j in exclude:
        w[j] = 0.0
    return w / w.sum()


def _demographics(rng, gp: GenParams, age: int, gender: int, insurance: int, acute: bool) -> tuple[int, ...]:
    sizes = gp.demo_sizes
    age_idx = int(np.clip(age - AGE_MIN, 0, sizes[0] - 1))
    p_adm = np.array([0.8, 0.15, 0.05]) if acute else np.array([0.55, 0.35, 0.10])
    adm_type = int(rng.choice(sizes[2], p=p_adm[: sizes[2]] / p_adm[: sizes[2]].sum()))
    adm_loc = int(min(rng.geometric(0.45) - 1, sizes[3] - 1))
    # older patients are discharged to care facilities more often
    shift = 0.25 if age >= 70 else 0.5
    dis_loc = int(min(rng.geometric(shift) - 1, sizes[4] - 1))
    return (age_idx, gender, adm_type, adm_loc, dis_loc, insurance)


def _insurance(rng, age: int, n_types: int) -> int:
    if age >= 65:
        return 0  # medicare
    weights = np.array([0.55, 0.25, 0.1, 0.1])[: n_types - 1]
    return int(1 + rng.choice(n_types - 1, p=weights / weights.sum()))


def _note(rng, gp: GenParams, world: _World, codes: Sequence[int], active: Sequence[int],
          emerging: Optional[int]) -> tuple[int, ...]:
    tokens: list[int] = []
    for c in codes:
        if rng.random() < gp.p_mention:
            k = 1 + int(rng.random() < 0.5)
            tokens.extend(int(world.leaf_block[c]) + rng.integers(0, gp.tokens_per_code, k))
    for j in active:
        k = rng.poisson(gp.cluster_words)
        tokens.extend(int(world.parent_block[j]) + rng.integers(0, gp.tokens_per_parent, k))
    if emerging is not None and rng.random() < gp.p_foreshadow:
        k = 1 + rng.poisson(gp.foreshadow_words)
        tokens.extend(int(world.symptom_block[emerging]) + rng.integers(0, gp.tokens_per_symptom, k))
    n_noise = 1 + rng.poisson(gp.noise_words)
    tokens.extend(rng.integers(world.noise_start, gp.vocab_size, n_noise))
    tokens = np.array(tokens, dtype=np.int64)
    rng.shuffle(tokens)
    return tuple(int(t) for t in tokens)


def _fill_codes(rng, ont: Ontology, world: _World, gp: GenParams, carried: list[int],
                active: Sequence[int], propensity: np.ndarray, size: int) -> list[int]:
    chosen = list(dict.fromkeys(carried))
    taken = np.zeros(ont.n_leaves, dtype=bool)
    taken[chosen] = True
    in_active = np.isin(ont.parent_of, list(active))
    while len(chosen) < size:
        pool = in_active & ~taken
        if rng.random() < gp.p_off_cluster or not pool.any():
            pool = ~in_active & ~taken
            weights = world.leaf_weight * pool
        else:
            weights = propensity * pool
        if weights.sum() <= 0:
            break
        c = int(rng.choice(ont.n_leaves, p=weights / weights.sum()))
        chosen.append(c)
        taken[c] = True
    return chosen


def _generate_patient(index: int, seed: int, ont: Ontology, gp: GenParams, world: _World) -> PatientRecord:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    n_visits = min(MIN_VISITS + rng.geometric(gp.extra_visit_p) - 1, MAX_VISITS)
    age = int(rng.integers(AGE_MIN, AGE_MIN + gp.demo_sizes[0] - 4))
    gender = int(rng.integers(0, gp.demo_sizes[1]))
    n_clusters = int(rng.integers(gp.min_clusters, gp.max_clusters + 1))
    active = list(rng.choice(ont.n_parents, size=n_clusters, replace=False,
                             p=_cluster_weights(world, age, gender, ())))
    propensity = world.leaf_weight * rng.dirichlet(np.full(ont.n_leaves, 0.7)) * ont.n_leaves

    visits = []
    prev_codes: list[int] = []
    emerged_now = False
    for t in range(n_visits):
        size = int(np.clip(1 + rng.poisson(gp.codes_per_visit), 1, MAX_CODES))
        carried = [c for c in prev_codes if ont.parent_of[c] in active and rng.random() < gp.p_persist]
        codes = _fill_codes(rng, ont, world, gp, carried, active, propensity, size)

        # decide what happens before the next visit; the note hints at it
        emerging = None
        if t + 1 < n_visits:
            if len(active) > 1 and rng.random() < gp.p_resolve:
                active.pop(int(rng.integers(len(active))))
            if len(active) < ont.n_parents and rng.random() < gp.p_new_cluster:
                emerging = int(rng.choice(ont.n_parents, p=_cluster_weights(world, age, gender, active)))

        insurance = _insurance(rng, age, gp.demo_sizes[5])
        demo = _demographics(rng, gp, age, gender, insurance, emerged_now)
        note = _note(rng, gp, world, codes, [j for j in active if j != emerging], emerging)
        visits.append(Visit(tuple(sorted(codes)), demo, note))

        emerged_now = emerging is not None
        if emerging is not None:
            active.append(emerging)
            # a newly emerged condition shows up in force at the next visit
            burst = _fill_codes(rng, ont, world, gp, [], [emerging], propensity,
                                int(3 + rng.poisson(2.0)))
            prev_codes = codes + burst
        else:
            prev_codes = codes
        if rng.random() < 0.4:
            age += 1
    return PatientRecord(f"S{seed}-{index:05d}", tuple(visits))


def generate_cohort(seed: int, n_patients: int, ont: Ontology, gen_params: Optional[GenParams] = None) -> list[PatientRecord]:
    """Deterministic synthetic cohort; see the module docstring for the story."""
    if n_patients < 1:
        raise ConfigError("n_patients must be >= 1")
    gp = gen_params or GenParams()
    gp.validate(ont)
    world = _world(seed, ont, gp)
    return [_generate_patient(i, seed, ont, gp, world) for i in range(n_patients)]


# ---------------------------------------------------------------------------
# preprocessing and splitting


def preprocess(records: Iterable[PatientRecord], max_visits: int = MAX_VISITS, max_words: int = W_MAX,
               min_visits: int = MIN_VISITS) -> list[PatientRecord]:
    """Apply the cohort selection rules.

    Visits without a note (or without any code) are dropped, notes are cut to
    ``max_words`` tokens, visits beyond ``max_visits`` are removed, and
    patients left with fewer than ``min_visits`` visits are excluded.
    """
    out = []
    for rec in records:
        visits = [Visit(v.codes, v.demographics, v.note[:max_words])
                  for v in rec.visits if len(v.note) > 0 and len(v.codes) > 0]
        visits = visits[:max_visits]
        if len(visits) >= min_visits:
            out.append(PatientRecord(rec.patient_id, tuple(visits)))
    return out


def split(records: Sequence[PatientRecord], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Patient-level (train, valid, test) split; sizes floor the first two ratios."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(records)
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_valid = int(math.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) == 0:
        raise ConfigError(f"split of {n} patients with ratios {tuple(ratios)} leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [records[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_valid]), pick(order[n_train + n_valid:])


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Batch:
    """Padded tensors for a group of patients.

    Visit ``t`` of the input axis predicts visit ``t + 1``: a patient with
    ``T`` visits contributes ``T - 1`` input positions. Notes are packed only
    for real input visits; ``note_slot[b, t]`` indexes into ``notes`` and
    points one past the last row for padded positions.
    """

    patient_ids: tuple[str, ...]
    mask: np.ndarray  # (B, T) bool
    codes: np.ndarray  # (B, T, |C|) multi-hot
    demographics: np.ndarray  # (B, T, 6) int
    notes: np.ndarray  # (n_real, L) int
    note_mask: np.ndarray  # (n_real, L) bool
    note_slot: np.ndarray  # (B, T) int
    y: np.ndarray  # (B, T, |C|) next-visit leaf targets
    o: np.ndarray  # (B, T, |A|) next-visit parent targets
    input_codes: tuple = field(default=(), repr=False)  # per patient, per input visit
    target_codes: tuple = field(default=(), repr=False)  # per patient, per input visit

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def collate(records: Sequence[PatientRecord], ont: Ontology, min_note_len: int = MIN_NOTE_PAD) -> Batch:
    if not records:
        raise ValueError("cannot collate an empty group")
    for rec in records:
        if len(rec.visits) < 2:
            raise ValueError(f"patient {rec.patient_id} has fewer than two visits")
    B = len(records)
    T = max(len(r.visits) - 1 for r in records)
    C, A = ont.n_leaves, ont.n_parents
    mask = np.zeros((B, T), dtype=bool)
    codes = np.zeros((B, T, C))
    demo = np.zeros((B, T, 6), dtype=np.int64)
    y = np.zeros((B, T, C))
    o = np.zeros((B, T, A))
    note_rows = []
    slots = np.zeros((B, T), dtype=np.int64)
    input_codes, target_codes = [], []
    for b, rec in enumerate(records):
        ins, tgts = [], []
        for t, (cur, nxt) in enumerate(zip(rec.visits[:-1], rec.visits[1:])):
            mask[b, t] = True
            codes[b, t] = leaf_label_vector(cur.codes, ont)
            demo[b, t] = cur.demographics
            y[b, t] = leaf_label_vector(nxt.codes, ont)
            o[b, t] = ancestor_label_vector(nxt.codes, ont)
            slots[b, t] = len(note_rows)
            note_rows.append(cur.note)
            ins.append(cur.codes)
            tgts.append(nxt.codes)
        input_codes.append(tuple(ins))
        target_codes.append(tuple(tgts))
    n_real = len(note_rows)
    slots[~mask] = n_real
    L = max(min_note_len, max(len(n) for n in note_rows))
    notes = np.full((n_real, L), PAD, dtype=np.int64)
    note_mask = np.zeros((n_real, L), dtype=bool)
    for i, row in enumerate(note_rows):
        notes[i, :len(row)] = row
        note_mask[i, :len(row)] = True
    return Batch(tuple(r.patient_id for r in records), mask, codes, demo, notes, note_mask, slots, y, o,
                 tuple(input_codes), tuple(target_codes))


def make_batches(records: Sequence[PatientRecord], batch_size: int, ont: Ontology,
                 shuffle_seed: Optional[int] = None, min_note_len: int = MIN_NOTE_PAD) -> list[Batch]:
    """Group patients into padded batches; shuffles patient order when a seed is given."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    return [collate([records[i] for i in order[s:s + batch_size]], ont, min_note_len)
            for s in range(0, len(records), batch_size)]


def unpad(batch: Batch) -> list[dict]:
    """Recover each patient's input visits (codes, demographics, note) and target codes."""
    out = []
    for b in range(batch.size):
        visits = []
        for t in np.flatnonzero(batch.mask[b]):
            row = batch.note_slot[b, t]
            note = tuple(int(w) for w in batch.notes[row][batch.note_mask[row]])
            visits.append({
                "codes": tuple(int(c) for c in np.flatnonzero(batch.codes[b, t])),
                "demo": tuple(int(h) for h in batch.demographics[b, t]),
                "note": note,
                "target": tuple(int(c) for c in np.flatnonzero(batch.y[b, t])),
            })
        out.append({"patient_id": batch.patient_ids[b], "visits": visits})
    return out


# ---------------------------------------------------------------------------
# cohort files


def write_cohort(records: Iterable[PatientRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    return path


def read_cohort(path) -> list[PatientRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PatientRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def cohort_stats(records: Sequence[PatientRecord]) -> dict:
    visits = [v for r in records for v in r.visits]
    return {
        "patients": len(records),
        "visits": len(visits),
        "visits_per_patient": len(visits) / max(len(records), 1),
        "codes_per_visit": float(np.mean([len(v.codes) for v in visits])) if visits else 0.0,
        "max_codes_per_visit": max((len(v.codes) for v in visits), default=0),
        "words_per_visit": float(np.mean([len(v.note) for v in visits])) if visits else 0.0,
    }
