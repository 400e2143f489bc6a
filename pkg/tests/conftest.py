import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def mnist():
    from fedleak.data import bundled_mnist

    return bundled_mnist()


@pytest.fixture(scope="session")
def panel():
    from fedleak.data import natural_image_panel

    return natural_image_panel(10)


ACCEPTANCE: list[str] = []


def record(number: int, ok: bool, detail: str) -> bool:
    """Log one acceptance verdict line and return ``ok``."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
