import numpy as np
import pytest

from moesim.core import init_experts, route_topk


def random_instance(seed, tokens, experts, k, hidden, ffn):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((tokens, hidden)).astype(np.float32)
    router = rng.standard_normal((hidden, experts)).astype(np.float32)
    routing = route_topk(x, router, k)
    weights = init_experts(rng, experts, hidden, ffn)
    return x, routing, weights


@pytest.fixture
def small_instance():
    return random_instance(0, 32, 4, 2, 16, 24)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], outcome, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, outcome, detail in sorted(lines):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number:>2}: {detail}")
