import numpy as np
import pytest
import torch
from torch.func import functional_call


def params_as_function(module, loss_of_output, *inputs):
    """Return (f, x0): f maps a flat parameter vector to the scalar loss."""
    names = [n for n, _ in module.named_parameters()]
    shapes = [p.shape for _, p in module.named_parameters()]
    sizes = [p.numel() for _, p in module.named_parameters()]
    x0 = torch.cat([p.detach().reshape(-1) for _, p in module.named_parameters()])

    def f(flat):
        chunks = torch.split(flat, sizes)
        params = {n: c.reshape(s) for n, c, s in zip(names, chunks, shapes)}
        return loss_of_output(functional_call(module, params, inputs))

    return f, x0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if getattr(rep, "when", None) == "call" and "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for crit, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {crit}: {verdict} ({detail})")
