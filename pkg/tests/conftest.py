"""Shared test utilities: finite-difference oracles, the fake LLM
endpoint, and the session laboratory."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from attacklab import tensor as T


def fd_gradient(f, arrays, h=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    ``f`` takes the list of arrays and returns a float; returns one
    gradient array per input. Independent of the autodiff path.
    """
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[k].reshape(-1)[i] += h
            hi = f(bumped)
            bumped[k].reshape(-1)[i] -= 2 * h
            lo = f(bumped)
            flat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def fd_probe(f, array, coords, h=1e-5):
    """Central differences of ``f`` at selected flat coordinates only."""
    out = []
    for c in coords:
        hi = array.copy()
        hi.reshape(-1)[c] += h
        lo = array.copy()
        lo.reshape(-1)[c] -= h
        out.append((f(hi) - f(lo)) / (2 * h))
    return np.array(out)


def max_rel_err(a, b, floor=1e-6):
    """Max elementwise relative error with an absolute floor near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build, arrays, rel_tol=1e-4, h=1e-5):
    """Compare autodiff gradients of ``build`` against finite differences.

    ``build`` maps a list of Tensors to a scalar Tensor; every input is
    treated as grad-tracked.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    grad_map = T.backward(loss, leaves=tensors)
    analytic = [grad_map[t].data for t in tensors]

    def scalar(arrs):
        return build([T.Tensor(a) for a in arrs]).item()

    numeric = fd_gradient(scalar, arrays, h=h)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst <= rel_tol, f"gradient mismatch: max rel err {worst:.3e}"
    return worst


@pytest.fixture(autouse=True)
def _reset_debug_checks():
    yield
    T.set_debug_checks(False)


@pytest.fixture(scope="session")
def lab0():
    """One fully wired laboratory, shared across test modules."""
    from attacklab.lab import build_lab

    return build_lab(0)


class _FakeLLMHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length).decode("utf-8"))
        self.server.requests.append(
            {"body": body, "auth": self.headers.get("Authorization")})
        if self.server.script:
            status, payload = self.server.script.pop(0)
        else:
            status, payload = self.server.responder(body)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def completion(text):
    """A minimal chat-completions payload carrying one reply."""
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


@pytest.fixture
def fake_llm(monkeypatch):
    """A scripted local chat-completions endpoint. Append (status,
    payload) pairs to ``server.script``, or set ``server.responder`` to
    a callable(body) -> (status, payload) for request-dependent replies;
    requests land in ``server.requests``."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FakeLLMHandler)
    server.requests = []
    server.script = []
    server.responder = lambda body: (500, {"error": "no reply scripted"})
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    monkeypatch.setenv("ATTACKLAB_LLM_KEY", "test-key-123")
    server.url = f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    yield server
    server.shutdown()
    server.server_close()
