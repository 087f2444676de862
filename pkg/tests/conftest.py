import pytest

from urlb.config import resolve

TINY = {
    "backbone.hidden_dim": "16", "backbone.batch": "16", "backbone.seed_frames": "100",
    "episode_length": "50", "pretrain_steps": "300", "snapshot_steps": "150,300",
    "finetune_steps": "200", "eval_episodes": "2", "skill_budget_episodes": "4",
    "expert_budget": "200", "expert_seeds": "0", "intrinsic.aps.lstsq_batch": "100",
    "intrinsic.proto.num_protos": "8", "intrinsic.proto.queue_size": "32",
}
for algo in ("icm", "disagreement", "rnd", "apt", "smm", "diayn", "aps"):
    TINY[f"intrinsic.{algo}.hidden_dim"] = "16"
for algo in ("icm", "rnd", "apt", "proto", "smm", "diayn"):
    TINY[f"intrinsic.{algo}.rep_dim"] = "8"


def tiny_config(**overrides):
    flags = dict(TINY)
    flags.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return resolve({}, flags)


@pytest.fixture
def tiny():
    return tiny_config


# -- acceptance summary --------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` get one PASS/FAIL line in
# the terminal summary; ``record_property("detail", ...)`` adds the measurement.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _criteria[marker] = (report.outcome, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result()._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), (outcome, detail) in sorted(_criteria.items()):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
