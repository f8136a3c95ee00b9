import pytest

from orthoseg.synth import SyntheticFieldSpec, write_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three 96x96 synthetic plots tiled at 32 px."""
    spec = SyntheticFieldSpec(
        width=96, height=96, row_spacing=16, plant_spacing=12, canopy_width=6,
        weed_density=0.02, seed=3,
    ).with_noise(0.05)
    out = tmp_path_factory.mktemp("tiny")
    return write_dataset(spec, out, ["P1", "P2", "P3"], tile_size=32, suffix=".hdr")


# Acceptance summary: test_acceptance appends (criterion, passed, detail) here.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
