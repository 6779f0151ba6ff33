import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from signgame.core import GameConfig

ACCEPTANCE_LINES = []


def make_cfg(**overrides):
    data = dict(
        n_agents=12,
        lexicon_size=12,
        rounds=300,
        memory_window=5,
        lose_shift_alpha=0.75,
        condition="SCHEMA",
        seed=0,
        agent_roster=[{"kind": "mock", "count": "rest", "params": {"compliance_prob": 1.0}}],
    )
    data.update(overrides)
    return GameConfig.from_dict(data)


@pytest.fixture
def cfg_factory():
    return make_cfg


class StubChatServer:
    """Minimal OpenAI-compatible /chat/completions server.

    ``reply`` maps the request JSON to (content, usage-or-None).
    """

    def __init__(self, reply):
        self.reply = reply
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                req = json.loads(body)
                outer.requests.append(req)
                content, usage = outer.reply(req)
                payload = {"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}
                if usage is not None:
                    payload["usage"] = usage
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def base_url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def stubborn_reply(req):
    """Non-compliant on the first try, compliant once reminded."""
    user = req["messages"][-1]["content"]
    if "Reminder:" in user:
        text = "@say {name: C2}"
    else:
        text = "I would probably go with C3 for this one"
    return text, {"completion_tokens": len(text.split()) + 1, "prompt_tokens": 40}


@pytest.fixture
def stub_server():
    def factory(reply=stubborn_reply):
        return StubChatServer(reply)

    return factory


@pytest.fixture
def acceptance_report():
    def record(number, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
