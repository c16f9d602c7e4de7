import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_laplace_beltrami(manifold, t, h=1e-4):
    """Central-difference div_g(kappa grad_g u) at intrinsic points t (M, d).

    The metric is built from finite differences of the embedding too, so the
    oracle shares nothing with the closed forms beyond embed/u/kappa.
    """
    from dmpde import manifolds as mf

    t = np.atleast_2d(np.asarray(t, float))
    d = t.shape[1]
    E = np.eye(d)

    def metric(x):
        J = np.stack([(mf.embed(manifold, x + h * E[i]) - mf.embed(manifold, x - h * E[i])) / (2 * h)
                      for i in range(d)], axis=-1)
        return np.einsum("mki,mkj->mij", J, J)

    def flux(x):
        g = metric(x)
        ginv = np.linalg.inv(g)
        sq = np.sqrt(np.linalg.det(g))
        du = np.stack([(mf.exact_solution(manifold, x + h * E[i]) - mf.exact_solution(manifold, x - h * E[i]))
                       / (2 * h) for i in range(d)], axis=-1)
        kap = mf.diffusion_kappa(manifold, x)
        return (sq * kap)[:, None] * np.einsum("mij,mj->mi", ginv, du), sq

    _, sq0 = flux(t)
    div = sum((flux(t + h * E[i])[0][:, i] - flux(t - h * E[i])[0][:, i]) / (2 * h) for i in range(d))
    return div / sq0


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """record(n, ok, detail): one PASS/FAIL line per acceptance criterion, echoed in the summary."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
