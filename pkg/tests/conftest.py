import http.server
import threading
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("suite", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


class _ObjectStore:
    """In-memory bucket contents plus failure injection for the loopback server."""

    def __init__(self):
        self.objects: dict[str, bytes] = {}
        self.fail_next: list[int] = []  # status codes to return before serving normally
        self.requests: list[tuple[str, str | None]] = []
        self.ignore_range = False


def _handler(store: _ObjectStore):
    class Handler(http.server.BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_GET(self):
            rng = self.headers.get("Range")
            store.requests.append((self.path, rng))
            if store.fail_next:
                code = store.fail_next.pop(0)
                self.send_response(code)
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            body = store.objects.get(self.path)
            if body is None:
                self.send_response(404)
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            if rng and not store.ignore_range:
                first, _, last = rng.removeprefix("bytes=").partition("-")
                first, last = int(first), int(last)
                if first >= len(body):
                    self.send_response(416)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                chunk = body[first : min(last, len(body) - 1) + 1]
                self.send_response(206)
                self.send_header("Content-Range", f"bytes {first}-{first + len(chunk) - 1}/{len(body)}")
            else:
                chunk = body
                self.send_response(200)
            self.send_header("Content-Length", str(len(chunk)))
            self.end_headers()
            self.wfile.write(chunk)

    return Handler


@pytest.fixture
def object_server():
    """Loopback HTTP server; yields (endpoint, store)."""
    store = _ObjectStore()
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _handler(store))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}", store
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture(scope="session")
def mini_exp1(tmp_path_factory) -> Path:
    """Manifest path of the miniature training experiment (shared, read-only)."""
    from wsirepro.repro import miniature_experiment1

    return miniature_experiment1(tmp_path_factory.mktemp("exp1"))


# -- acceptance reporting ------------------------------------------------------

SUITE_LIMIT_S = 300.0
_acceptance: list[tuple[str, bool, float]] = []
_session_start = [0.0]


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): a top-level acceptance criterion")


def pytest_sessionstart(session):
    import time

    _session_start[0] = time.perf_counter()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _acceptance.append((marker.args[0], report.passed, report.duration))


def _suite_elapsed() -> float:
    import time

    return time.perf_counter() - _session_start[0]


def pytest_sessionfinish(session, exitstatus):
    # Only meaningful when the whole suite ran.
    if _acceptance and _suite_elapsed() > SUITE_LIMIT_S and exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, passed, duration in _acceptance:
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  ({duration:.2f} s)")
    elapsed = _suite_elapsed()
    tr.write_line(f"{'PASS' if elapsed <= SUITE_LIMIT_S else 'FAIL'}  whole suite under {SUITE_LIMIT_S:.0f} s  "
                  f"({elapsed:.2f} s)")
