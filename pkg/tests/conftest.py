import pytest

_RESULTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    label = getattr(item.function, "criterion", None)
    if label is None:
        return
    if report.when == "setup" and report.passed:
        # module fixtures (a shared trained model) count toward the first test that uses them
        item.setup_seconds = report.duration
        return
    if report.when == "teardown":
        return
    seconds = report.duration + getattr(item, "setup_seconds", 0.0)
    detail = "; ".join([f"{k}={v}" for k, v in item.user_properties] + [f"{seconds:.1f}s"])
    _RESULTS.append((label, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_RESULTS, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
