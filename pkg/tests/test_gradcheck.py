import functools

import numpy as np

from cvformer import autodiff as ad
from cvformer import cli
from cvformer.gradcheck import OP_CASES, OP_TOL, run_suite


def test_every_registered_op_has_a_case():
    assert set(ad.registered_ops()) == set(OP_CASES)


def test_ops_pass_and_each_listed_once():
    results = run_suite(points=2, include_model=False)
    names = [r.name for r in results]
    assert sorted(names) == sorted(ad.registered_ops())
    assert len(names) == len(set(names))
    assert all(r.passed and r.tolerance == OP_TOL for r in results), [r for r in results if not r.passed]


def test_corrupted_backward_is_detected(monkeypatch, capsys):
    original = ad.GELU.backward
    monkeypatch.setattr(ad.GELU, "backward", lambda self, g: tuple(1.1 * x for x in original(self, g)))
    # the end-to-end case is slow and not needed to catch a broken primitive
    monkeypatch.setattr(cli, "run_suite", functools.partial(run_suite, include_model=False))
    assert cli.main(["gradcheck", "--points", "1"]) == 1
    out = capsys.readouterr().out
    gelu_line = next(line for line in out.splitlines() if line.startswith("gelu "))
    assert gelu_line.endswith("FAIL")
    assert "failed: gelu" in out


def test_suite_restores_default_precision():
    run_suite(points=1, include_model=False)
    assert ad.Tensor([1.0]).dtype == np.float32
