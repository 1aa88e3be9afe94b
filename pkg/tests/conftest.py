from contextlib import contextmanager

import numpy as np
import pytest

from policyeval.data import EvaluationDataset, Individual, PolicyAssignment, PredictionMatrix


def make_dataset(A, Y, cases=None, X=None, locations=None, capacities=None):
    """Dataset from location labels; one case per individual unless ``cases`` given."""
    n = len(A)
    cases = cases or [f"c{i + 1}" for i in range(n)]
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    inds = [Individual(f"i{i + 1}", cases[i], str(A[i]), int(Y[i]), tuple(X[i])) for i in range(n)]
    return EvaluationDataset.from_individuals(inds, capacities, locations=locations)


def policy_for(dataset, labels):
    """Policy giving individual i's case the location ``labels[i]``."""
    mapping = {}
    for ind, lab in zip(dataset.individuals, labels):
        mapping[ind.case_id] = str(lab)
    return PolicyAssignment.from_cases(dataset.cases, mapping)


def predictions_for(dataset, values):
    return PredictionMatrix.for_dataset(dataset, np.asarray(values, dtype=float))


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def toy_files(tmp_path):
    """4 individuals, 2 locations, cases c1={i1,i2}, c2={i3}, c3={i4}."""
    ind = write_text(
        tmp_path / "individuals.csv",
        "individual_id,case_id,location,outcome,x1,arrival\n"
        "i1,c1,L1,1,0.5,3\n"
        "i2,c1,L1,0,-1.25,3\n"
        "i3,c2,L2,1,2.0,1\n"
        "i4,c3,L2,1,0.0,2\n",
    )
    pred = write_text(
        tmp_path / "predictions.csv",
        "individual_id,mu_L1,mu_L2\n"
        "i1,0.6,0.3\n"
        "i2,0.5,0.2\n"
        "i3,0.4,0.7\n"
        "i4,0.9,0.1\n",
    )
    observed = write_text(tmp_path / "policy_observed.csv", "case_id,location\nc1,L1\nc2,L2\nc3,L2\n")
    return {"individuals": ind, "predictions": pred, "policy": observed, "dir": tmp_path}


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(ACCEPTANCE_KEY, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with verdict(3, "title") as note: ...; note("detail")``.
    """
    store = request.config.stash[ACCEPTANCE_KEY]

    @contextmanager
    def run(number, title):
        details = []
        try:
            yield details.append
        except BaseException as exc:
            line = f"criterion {number}: FAIL  {title}  ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
            store[number] = line
            print(line)
            raise
        line = f"criterion {number}: PASS  {title}" + (f"  ({'; '.join(details)})" if details else "")
        store[number] = line
        print(line)

    return run
