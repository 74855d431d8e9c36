import sys


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        ok, title, detail = acceptance.RESULTS[number]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"[{status}] criterion {number:g}: {title} -- {detail}")
