import numpy as np
import pytest

from necho.data import (MAX_CODES, ConfigError, GenParams, PatientRecord, Visit, cohort_stats, collate,
                        generate_cohort, make_batches, preprocess, read_cohort, split, unpad, write_cohort)
from necho.harness.metrics import accuracy_at_ks, label_frequencies, repeat_previous_scores
from necho.ontology import ancestor_label_vector, default_ontology, leaf_label_vector

ONT = default_ontology()


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(1, 100, ONT)


def _visit(codes=(0,), note=(5, 6), demo=(0, 0, 0, 0, 0, 0)):
    return Visit(tuple(codes), tuple(demo), tuple(note))


def test_generation_shape_and_determinism(cohort):
    assert len(cohort) == 100
    assert all(2 <= len(r.visits) <= 21 for r in cohort)
    assert generate_cohort(1, 100, ONT) == cohort
    assert generate_cohort(2, 100, ONT) != cohort
    for r in cohort:
        for v in r.visits:
            assert 1 <= len(v.codes) <= MAX_CODES
            assert len(v.demographics) == 6 and len(v.note) >= 1
            assert all(0 <= c < ONT.n_leaves for c in v.codes)


def test_codes_per_visit_near_the_target(cohort):
    assert 8 <= cohort_stats(cohort)["codes_per_visit"] <= 18


def test_inconsistent_generator_parameters_raise():
    with pytest.raises(ConfigError, match="vocab_size"):
        generate_cohort(0, 5, ONT, GenParams(vocab_size=100))
    with pytest.raises(ConfigError):
        generate_cohort(0, 5, ONT, GenParams(max_clusters=13))
    with pytest.raises(ConfigError):
        generate_cohort(0, 0, ONT)


def test_preprocess_rules():
    one = PatientRecord("one", (_visit(),))
    long = PatientRecord("long", tuple(_visit(codes=(t % 5,)) for t in range(25)))
    wordy = PatientRecord("wordy", (_visit(note=tuple(range(2, 12002))), _visit()))
    gappy = PatientRecord("gappy", (_visit(), _visit(note=()), _visit(codes=(3,))))
    out = {r.patient_id: r for r in preprocess([one, long, wordy, gappy])}
    assert "one" not in out
    assert len(out["long"].visits) == 21
    assert out["long"].visits == long.visits[:21]
    assert len(out["wordy"].visits[0].note) == 10000
    assert [v.codes for v in out["gappy"].visits] == [(0,), (3,)]


def test_split_sizes_and_disjointness(cohort):
    train, valid, test = split(cohort, (0.8, 0.1, 0.1), seed=0)
    assert (len(train), len(valid), len(test)) == (80, 10, 10)
    ids = [{r.patient_id for r in part} for part in (train, valid, test)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert split(cohort, seed=0) == (train, valid, test)
    fake = [PatientRecord(str(i), ()) for i in range(6812)]
    assert tuple(len(p) for p in split(fake)) == (5449, 681, 682)
    with pytest.raises(ConfigError):
        split(cohort[:3])
    with pytest.raises(ConfigError):
        split(cohort, (0.5, 0.5, 0.5))


def test_padding_to_the_longest_patient():
    short = PatientRecord("a", tuple(_visit(codes=(t,)) for t in range(3)))
    long = PatientRecord("b", tuple(_visit(codes=(t,)) for t in range(6)))
    batch = collate([short, long], ONT)
    # T counts input positions: 3 and 6 visits give 2 and 5 inputs
    assert batch.mask.shape == (2, 5)
    assert (~batch.mask[0]).sum() == 3 and batch.mask[1].all()
    assert batch.notes.shape[1] >= 4
    assert np.all(batch.note_slot[0, 2:] == batch.notes.shape[0])
    assert batch.codes[0, 2:].sum() == 0 and batch.y[0, 2:].sum() == 0


def test_targets_are_shifted_by_one(cohort):
    batch = collate(cohort[:4], ONT)
    for b, rec in enumerate(cohort[:4]):
        for t in range(len(rec.visits) - 1):
            np.testing.assert_array_equal(batch.y[b, t], leaf_label_vector(rec.visits[t + 1].codes, ONT))
            np.testing.assert_array_equal(batch.o[b, t], ancestor_label_vector(rec.visits[t + 1].codes, ONT))
            np.testing.assert_array_equal(batch.codes[b, t], leaf_label_vector(rec.visits[t].codes, ONT))


def test_unpad_recovers_the_records(cohort):
    for batch in make_batches(cohort[:13], 4, ONT, shuffle_seed=7):
        for item in unpad(batch):
            rec = next(r for r in cohort if r.patient_id == item["patient_id"])
            assert len(item["visits"]) == len(rec.visits) - 1
            for t, v in enumerate(item["visits"]):
                assert v["codes"] == rec.visits[t].codes
                assert v["demo"] == rec.visits[t].demographics
                assert v["note"] == rec.visits[t].note
                assert v["target"] == rec.visits[t + 1].codes


def test_batching_is_deterministic_and_shuffles_by_seed(cohort):
    a = make_batches(cohort, 4, ONT, shuffle_seed=3)
    b = make_batches(cohort, 4, ONT, shuffle_seed=3)
    assert [x.patient_ids for x in a] == [x.patient_ids for x in b]
    c = make_batches(cohort, 4, ONT, shuffle_seed=4)
    assert [x.patient_ids for x in a] != [x.patient_ids for x in c]
    assert sorted(p for x in a for p in x.patient_ids) == sorted(r.patient_id for r in cohort)
    with pytest.raises(ConfigError):
        make_batches(cohort, 0, ONT)


def test_cohort_file_round_trip(cohort, tmp_path):
    path = write_cohort(cohort[:10], tmp_path / "c.jsonl")
    assert read_cohort(path) == cohort[:10]
    first = path.read_text().splitlines()[0]
    assert first.startswith('{"patient_id":') and '"demo":' in first


def test_repeating_the_previous_visit_beats_marginal_frequency():
    records = preprocess(generate_cohort(1, 600, ONT))
    train, _, test = split(records)
    freq = label_frequencies((v.codes for r in train for v in r.visits), ONT.n_leaves)
    prev = [r.visits[t].codes for r in test for t in range(len(r.visits) - 1)]
    truth = [r.visits[t + 1].codes for r in test for t in range(len(r.visits) - 1)]
    marginal = accuracy_at_ks(np.tile(freq, (len(truth), 1)), truth, (10,))[10]
    repeat = accuracy_at_ks(repeat_previous_scores(prev, freq), truth, (10,))[10]
    assert repeat > marginal
