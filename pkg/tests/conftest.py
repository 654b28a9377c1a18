import pytest

from flexroi.model import ModelConfig
from flexroi.synthgen import SynthConfig, make_scenes
from flexroi.trainer import TrainConfig

TINY_SYNTH = SynthConfig(image_size=64, min_objects=1, max_objects=3, min_scale=8, max_scale=28)
TINY_MODEL = ModelConfig(levels=3, channels=8, pool_size=3, hidden=16, feedback_hidden=8, delta=8.0)


def tiny_train_config(**model_overrides) -> TrainConfig:
    from dataclasses import replace
    return TrainConfig(model=replace(TINY_MODEL, **model_overrides), epochs=2, batch_size=4, lr=0.05, seed=0)


@pytest.fixture(scope="session")
def tiny_scenes():
    return make_scenes(8, 5, TINY_SYNTH, blur=1)


# ---------------------------------------------------------------- acceptance summary
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and report.passed
    notes = [v for k, v in item.user_properties if k == "detail"]
    if report.when == "call":
        entry["notes"].extend(notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{notes}]" if notes else ""))
