"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured values
(visible with ``pytest -s`` or in ``-v`` captured output on failure).
"""

import dataclasses

import pytest

from nsldp.galerkin import build_torus_model
from nsldp.verify import CRITERIA, SUITES, VerifyContext, run_criterion, run_suite


@pytest.mark.parametrize("name", list(CRITERIA))
def test_criterion(name):
    c = run_criterion(name)
    print(c.line())
    assert c.passed, c.line()


def test_suites_cover_every_criterion():
    covered = set(SUITES["algebraic"]) | set(SUITES["stochastic"]) | set(SUITES["determinism"])
    assert covered == set(CRITERIA) == set(SUITES["acceptance"])


def _perturbed_builder(*args, **kwargs):
    m = build_torus_model(*args, **kwargs)
    val = m.tensor_val.copy()
    val[0] *= 1.01
    return dataclasses.replace(m, tensor_val=val)


def test_perturbed_tensor_fails_only_cancellation():
    results = run_suite("algebraic", VerifyContext(model_builder=_perturbed_builder))
    for c in results:
        print(c.line())
    failed = {c.name for c in results if not c.passed}
    assert failed == {"cancellation"}
