import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", max_examples=20, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CRITERIA = {
    1: "lemma property suite",
    2: "reduction identities",
    3: "gradient correctness",
    4: "null-shift sanity",
    5: "adaptation effect",
    6: "soft-margin vs original parity",
    7: "CLI reproducibility",
    8: "bound reporting",
}


def pytest_configure(config):
    config.acceptance = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        if number not in results:
            terminalreporter.write_line(f"criterion {number} ({title}): NOT RUN")
            continue
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'} - {detail}")
