import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyeval.data import (
    DataError,
    derive_individual_assignment,
    ingest_dataset,
    observed_baseline,
    read_policy,
    read_predictions,
    write_capacities,
    write_individuals,
    write_policy,
    write_predictions,
)

from conftest import make_dataset, policy_for, write_text


def test_ingest_toy(toy_files):
    ds = ingest_dataset(toy_files["individuals"], exclude_columns=["arrival"])
    assert (ds.N, ds.K, ds.C) == (4, 2, 3)
    assert ds.location_ids == ("L1", "L2")
    assert [c.member_ids for c in ds.cases] == [("i1", "i2"), ("i3",), ("i4",)]
    assert ds.X.shape == (4, 1)
    assert list(ds.case_sizes) == [2, 1, 1]


def test_inconsistent_case_placement(tmp_path):
    f = write_text(tmp_path / "a.csv", "individual_id,case_id,location,outcome\ni1,c1,L1,1\ni2,c1,L2,0\n")
    with pytest.raises(DataError, match="inconsistent case placement") as exc:
        ingest_dataset(f)
    assert exc.value.row == 3


def test_empty_dataset(tmp_path):
    with pytest.raises(DataError, match="empty dataset"):
        ingest_dataset(write_text(tmp_path / "a.csv", "individual_id,case_id,location,outcome\n"))
    with pytest.raises(DataError, match="empty dataset"):
        ingest_dataset(write_text(tmp_path / "b.csv", ""))


@pytest.mark.parametrize(
    "row, message",
    [
        ("i2,c2,L1,2", "outcome outside"),
        ("i2,c2,L1,1,extra", "malformed row"),
        ("i1,c2,L1,1", "duplicate individual"),
    ],
)
def test_bad_rows_report_row_number(tmp_path, row, message):
    f = write_text(tmp_path / "a.csv", f"individual_id,case_id,location,outcome\ni1,c1,L1,1\n{row}\n")
    with pytest.raises(DataError, match=message) as exc:
        ingest_dataset(f)
    assert exc.value.row == 3


def test_capacity_only_location_is_legal(tmp_path):
    ind = write_text(tmp_path / "a.csv", "individual_id,case_id,location,outcome\ni1,c1,L1,1\n")
    cap = write_text(tmp_path / "c.csv", "location_id,capacity\nL1,3\nL9,2\n")
    ds = ingest_dataset(ind, cap)
    assert ds.location_ids == ("L1", "L9")
    assert list(ds.historical_counts()) == [1, 0]
    assert ds.declared_capacities() == {"L1": 3, "L9": 2}


def test_natural_location_order():
    ds = make_dataset(["L10", "L2", "L1"], [0, 1, 0])
    assert ds.location_ids == ("L1", "L2", "L10")


def test_derive_individual_assignment():
    ds = make_dataset(["L1", "L2", "L2"], [0, 0, 0], cases=["c1", "c2", "c2"])
    out = derive_individual_assignment(ds.cases, {"c1": "L1", "c2": "L2"})
    assert out == {"i1": "L1", "i2": "L2", "i3": "L2"}
    with pytest.raises(DataError, match="unassigned"):
        derive_individual_assignment(ds.cases, {"c1": "L1"})


def test_derive_individual_assignment_shared_case():
    ds = make_dataset(["L1", "L1"], [0, 0], cases=["c1", "c1"])
    assert derive_individual_assignment(ds.cases, {"c1": "L1"}) == {"i1": "L1", "i2": "L1"}


def test_observed_baseline():
    assert observed_baseline(make_dataset(["a"] * 4, [1, 0, 1, 1])) == 0.75
    assert observed_baseline(make_dataset(["a"] * 3, [0, 0, 0])) == 0.0


def test_observed_baseline_setup1_shape():
    # 337 employed out of 1000
    ds = make_dataset(["a"] * 1000, [1] * 337 + [0] * 663)
    assert abs(observed_baseline(ds) - 0.337) <= 1e-12


def test_round_trip(tmp_path, toy_files):
    ds = ingest_dataset(toy_files["individuals"], exclude_columns=["arrival"])
    write_individuals(tmp_path / "out.csv", ds)
    again = ingest_dataset(tmp_path / "out.csv")
    assert again.individuals == ds.individuals
    preds = read_predictions(toy_files["predictions"], ds)
    write_predictions(tmp_path / "p.csv", preds)
    assert np.array_equal(read_predictions(tmp_path / "p.csv", ds).values, preds.values)
    policy = read_policy(toy_files["policy"], ds)
    write_policy(tmp_path / "g.csv", policy, ds)
    assert (tmp_path / "g.csv").read_text() == toy_files["policy"].read_text()
    write_capacities(tmp_path / "cap.csv", {"L2": 5, "L1": 4})
    assert (tmp_path / "cap.csv").read_text() == "location_id,capacity\nL1,4\nL2,5\n"


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from(["L1", "L2", "L3"]), st.integers(0, 1), st.floats(-1e6, 1e6)),
        min_size=1,
        max_size=15,
    )
)
def test_round_trip_property(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "ind.csv"
    ds = make_dataset([r[0] for r in rows], [r[1] for r in rows], X=[[r[2]] for r in rows])
    write_individuals(path, ds)
    again = ingest_dataset(path)
    assert again.individuals == ds.individuals
    assert 0.0 <= observed_baseline(again) <= 1.0


def test_predictions_missing_column(tmp_path, toy_files):
    ds = ingest_dataset(toy_files["individuals"], exclude_columns=["arrival"])
    f = write_text(tmp_path / "p.csv", "individual_id,mu_L1\ni1,0.5\n")
    with pytest.raises(DataError, match="missing prediction column"):
        read_predictions(f, ds)


def test_predictions_out_of_range(tmp_path, toy_files):
    ds = ingest_dataset(toy_files["individuals"], exclude_columns=["arrival"])
    text = toy_files["predictions"].read_text().replace("0.9", "1.5")
    with pytest.raises(DataError, match="outside"):
        read_predictions(write_text(tmp_path / "p.csv", text), ds)


def test_policy_capacity_validation():
    ds = make_dataset(["L1", "L2"], [0, 1], capacities={"L1": 1, "L2": 1})
    policy_for(ds, ["L1", "L2"]).validate(ds)
    with pytest.raises(DataError, match="capacity"):
        policy_for(ds, ["L1", "L1"]).validate(ds)
