import numpy as np
import pytest

from chebgnn.graph import build_graph


def random_graph(rng, n, p=0.3, weighted=False, connected=True, features=None, labels=None):
    """Erdos-Renyi graph; a random spanning path is added when ``connected``."""
    edges = [tuple(e) for e in np.argwhere(np.triu(rng.random((n, n)) < p, k=1))]
    if connected and n > 1:
        order = rng.permutation(n)
        edges += [(int(order[i]), int(order[i + 1])) for i in range(n - 1)]
    edges = sorted({(min(u, v), max(u, v)) for u, v in edges})
    w = rng.uniform(0.5, 2.0, size=len(edges)) if weighted else None
    return build_graph(n, edges, w, features=features, node_labels=labels)


def central_diff(f, x, step):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a named acceptance criterion as PASS or FAIL for the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    class Recorder:
        def __init__(self):
            self.detail = ""

        def __call__(self, number, title):
            self.key = (number, title)
            results[self.key] = ("FAIL", "")
            return self

        def note(self, text):
            self.detail = text
            results[self.key] = (results[self.key][0], text)

    rec = Recorder()
    yield rec
    rep = getattr(request.node, "rep_call", None)
    if hasattr(rec, "key") and rep is not None:
        results[rec.key] = ("PASS" if rep.passed else "FAIL", rec.detail)


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (status, detail) in sorted(results.items()):
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
