"""Smoke test for the qsdlab extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
Run:                      python python/smoke_test.py   (or pytest python/)
"""

import json

import qsdlab

CHAIN_A = """qsd-chain v1 d=2
0 0 0.5
1 0 0.3
1 1 0.5
"""

DOWNWARD = """
to = x+1 ; p = 0.2
to = max(x-1, 0) ; p = 0.7*min(1, x)
to = x ; p = 0.4*max(0, 1-x)
V = pow(1.5, x)
"""


def test_certificate():
    r = json.loads(qsdlab.qsd(CHAIN_A))
    assert r["status"] == "pass"
    c = r["certificate"]
    assert c["theta_bar"] == 0.5
    assert c["j"] == [0, 1]
    assert abs(c["eta"][0][1] - 0.6) < 1e-9


def test_verify_matches_certificate():
    r = json.loads(qsdlab.verify(CHAIN_A, n=2000, samples=20000, seed=3))
    assert r["status"] == "pass"
    assert r["verification"]["j_hat"] == [0, 1]
    assert r["provenance"]["seeds"] == [3]


def test_reports_are_deterministic():
    assert qsdlab.analyze(CHAIN_A) == qsdlab.analyze(CHAIN_A)
    a = qsdlab.operator_lab(2, seed=5, instances=4)
    assert a == qsdlab.operator_lab(2, seed=5, instances=4)
    assert json.loads(a)["status"] == "pass"


def test_lyapunov_report():
    r = json.loads(qsdlab.lyapunov(DOWNWARD))
    assert r["command"] == "lyapunov"
    assert r["stability"]["stable"] == "pass"


def test_bad_input_raises():
    try:
        qsdlab.qsd("qsd-chain v1 d=2\n0 0 0.5\n1 0 0.8\n1 1 0.5\n")
    except ValueError as e:
        assert "row 1" in str(e)
    else:
        raise AssertionError("row sum above 1 was accepted")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok  {name}")
