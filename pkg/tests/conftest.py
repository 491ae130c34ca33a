import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion, summarised at the end of the run")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _criteria.append(("PASS" if report.passed else "FAIL", props["criterion"], props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _criteria:
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
