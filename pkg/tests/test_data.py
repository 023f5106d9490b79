import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_manifest, make_record
from spermsdf.data import (
    Label,
    Manifest,
    ManifestError,
    SplitError,
    SplitManifest,
    class_counts,
    filter_supervised,
    grouped_split,
    load_manifest,
    load_split,
    save_split,
    write_manifest,
)

U, F, N = Label.UNFRAGMENTED, Label.FRAGMENTED, Label.NULL


def cohort_manifest(n_unfrag=715, n_frag=512, n_null=591, n_patients=35, seed=0):
    """Cohort-sized manifest with 715/512/591 class totals spread over 35 patients."""
    labels = [U] * n_unfrag + [F] * n_frag + [N] * n_null
    random.Random(seed).shuffle(labels)
    return make_manifest([(f"P{i % n_patients:02d}", lab) for i, lab in enumerate(labels)])


def test_label_codes():
    assert U.code == 0 and F.code == 1 and N.code is None
    assert Label.parse("Fragmented") is F
    assert Label.parse(0) is U
    assert Label.parse(None) is N
    with pytest.raises(ValueError):
        Label.parse("maybe")


def test_load_three_line_file(manifest_file):
    m = load_manifest(manifest_file)
    assert len(m) == 3
    assert m.pixel_scale_um == 0.1
    assert m.primary_round == "round_1"
    assert m.records[0].phase_contrast_path == manifest_file.parent / "cell0.png"


def test_round_trip(tmp_path, manifest_file):
    m = load_manifest(manifest_file)
    out = write_manifest(m, tmp_path / "copy" / "m.jsonl")
    again = load_manifest(out)
    assert [r.cell_id for r in again.records] == [r.cell_id for r in m.records]
    assert [r.phase_contrast_path.resolve() for r in again.records] == \
        [r.phase_contrast_path.resolve() for r in m.records]
    assert [r.annotations for r in again.records] == [r.annotations for r in m.records]
    assert again.pixel_scale_um == m.pixel_scale_um


def test_duplicate_cell_id_names_both_lines(tmp_path):
    rec = {"cell_id": "x", "patient_id": "A", "phase_contrast": "a.png", "annotations": {"r": "fragmented"}}
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ManifestError, match=r"m.jsonl:2: duplicate cell_id 'x' \(first on line 1\)"):
        load_manifest(path)


@pytest.mark.parametrize("line,pattern", [
    ("{not json", "invalid JSON"),
    ('{"cell_id": "x", "patient_id": "A"}', "missing phase-contrast"),
    ('{"cell_id": "x", "patient_id": "", "phase_contrast": "a.png"}', "patient_id"),
    ('{"cell_id": "x", "patient_id": "A", "phase_contrast": "a.png", "annotations": {"r": "odd"}}', "invalid label"),
])
def test_schema_errors_carry_line_numbers(tmp_path, line, pattern):
    good = json.dumps({"cell_id": "ok", "patient_id": "A", "phase_contrast": "a.png"})
    path = tmp_path / "m.jsonl"
    path.write_text(good + "\n" + line + "\n")
    with pytest.raises(ManifestError, match=pattern) as info:
        load_manifest(path)
    assert ":2:" in str(info.value)


def test_pixel_scale_must_be_positive():
    with pytest.raises(ManifestError):
        Manifest((make_record("a", "P"),), pixel_scale_um=0.0)


def test_cohort_counts():
    # 715 + 512 + 591 = 1818
    m = cohort_manifest()
    assert len(m) == 1818 and len(m.patients) == 35
    assert class_counts(m) == (715, 512, 591)
    assert len(filter_supervised(m)) == 1227


def test_class_counts_trivial():
    assert class_counts(Manifest(())) == (0, 0, 0)
    assert class_counts(make_manifest([("A", F)] * 10)) == (0, 10, 0)


def test_missing_round_counts_as_null():
    m = Manifest((make_record("a", "P", F), make_record("b", "P", U)))
    assert class_counts(m, "round_2") == (0, 0, 2)
    assert len(filter_supervised(m, "round_2")) == 0


def test_filter_supervised_examples():
    assert len(filter_supervised(make_manifest([("A", N)] * 4))) == 0
    kept = filter_supervised(make_manifest([("A", F), ("A", N), ("B", U)]))
    assert [r.label("round_1") for r in kept.records] == [F, U]


def test_grouped_split_paper_shape():
    m = cohort_manifest()
    split = grouped_split(m, 7, seed=1)
    assert len(split.train_patients) == 28 and len(split.val_patients) == 7
    train, val = split.materialize(filter_supervised(m))
    assert len(train) + len(val) == 1227


def test_grouped_split_three_patients():
    m = make_manifest([("A", F), ("B", U), ("C", F)])
    for seed in range(10):
        split = grouped_split(m, 1, seed)
        assert split.val_patients in ({"A"}, {"B"}, {"C"})
        assert not split.val_patients & split.train_patients


def test_grouped_split_deterministic():
    m = cohort_manifest()
    assert grouped_split(m, 7, 42) == grouped_split(m, 7, 42)


@pytest.mark.parametrize("count", [0, 35, 40, -1])
def test_grouped_split_invalid_count(count):
    with pytest.raises(SplitError, match="val_patient_count"):
        grouped_split(cohort_manifest(), count, 0)


def test_split_rejects_overlap_and_uncovered_patients(tmp_path):
    with pytest.raises(SplitError):
        SplitManifest(frozenset({"A"}), frozenset({"A"}), 0)
    split = SplitManifest(frozenset({"A"}), frozenset({"B"}), 0)
    with pytest.raises(SplitError, match="absent"):
        split.materialize(make_manifest([("A", F), ("C", U)]))
    assert load_split(save_split(split, tmp_path / "s.json")) == split


def test_split_ignores_record_order():
    m = cohort_manifest()
    shuffled = list(m.records)
    random.Random(5).shuffle(shuffled)
    assert grouped_split(m, 5, 9) == grouped_split(m.with_records(shuffled), 5, 9)


labels_st = st.sampled_from([U, F, N])
manifest_st = st.lists(st.tuples(st.integers(0, 9).map(lambda i: f"P{i}"), labels_st), min_size=2, max_size=60)


@given(manifest_st, st.integers(0, 2**31), st.data())
@settings(max_examples=200, deadline=None)
def test_split_disjoint_and_covering(spec, seed, data):
    m = make_manifest(spec)
    if len(m.patients) < 2:
        return
    count = data.draw(st.integers(1, len(m.patients) - 1))
    split = grouped_split(m, count, seed)
    train, val = split.materialize(m)
    assert not {r.patient_id for r in train.records} & {r.patient_id for r in val.records}
    assert split.train_patients | split.val_patients == set(m.patients)
    assert len(train) + len(val) == len(m)


@given(manifest_st)
def test_filter_supervised_idempotent(spec):
    once = filter_supervised(make_manifest(spec))
    assert filter_supervised(once).records == once.records


@given(manifest_st, st.randoms(use_true_random=False))
def test_class_counts_permutation_invariant(spec, rnd):
    m = make_manifest(spec)
    records = list(m.records)
    rnd.shuffle(records)
    counts = class_counts(m)
    assert class_counts(m.with_records(records)) == counts
    assert sum(counts) == len(m)
