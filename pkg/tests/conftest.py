import pytest

from prevopf.grid import parse_case


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number, reported as PASS/FAIL")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:200]
    item.config._acceptance[mark.args[0]] = ("PASS" if rep.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        verdict, name, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {name}  {detail}".rstrip())


@pytest.fixture
def report_detail(request):
    """Attach a one-line summary to the acceptance report of this test."""

    def put(text):
        request.node.user_properties.append(("detail", text))
        print(text)

    return put


@pytest.fixture(scope="session")
def case30():
    return parse_case("case30")


@pytest.fixture(scope="session")
def case118():
    return parse_case("case118")
