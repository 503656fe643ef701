import numpy as np
import pytest

from hubvae.numerics import Architecture, init_params


def small_params(D=6, d=2, hidden=(5, 4), seed=0, tau=0.0):
    arch = Architecture(input_dim=D, latent_dim=d, hidden=hidden)
    return init_params(arch, np.random.default_rng(seed), tau=tau)


@pytest.fixture
def params():
    return small_params()


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
