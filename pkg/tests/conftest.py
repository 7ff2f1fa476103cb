import numpy as np
import pytest

from geoapportion.synth import SynthConfig, generate

POLLUTANT_HEADER = "time,site,pm1,pm25,pm10,tsp,bc,co,no,no2,temp"


@pytest.fixture
def raw_csv(tmp_path):
    """Write a small raw sensor table and return its path."""

    def _write(rows, header=POLLUTANT_HEADER, name="raw.csv"):
        path = tmp_path / name
        path.write_text("\n".join([header, *rows]) + "\n")
        return path

    return _write


@pytest.fixture
def schema_file(tmp_path):
    path = tmp_path / "schema.txt"
    path.write_text(
        "# column map\n"
        "timestamp = time\n"
        "location = site\n"
        "pollutant.PM1 = pm1\n"
        "pollutant.PM2.5 = pm25\n"
        "pollutant.PM10 = pm10\n"
        "pollutant.TSP = tsp\n"
        "pollutant.BC = bc\n"
        "pollutant.CO = co\n"
        "pollutant.NO = no\n"
        "pollutant.NO2 = no2\n"
        "covariate.temperature = temp\n"
    )
    return path


@pytest.fixture(scope="session")
def separable():
    """Noise-free separable data, K=3, J=6."""
    return generate(SynthConfig(n=3000, J=6, K=3, p_pure=0.05, seed=11))



ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _verdict(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
