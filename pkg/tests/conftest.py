import dataclasses
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import lia  # noqa: E402
from lia.cli import cmd_train  # noqa: E402
from lia.trainer import TrainConfig, parse_metrics  # noqa: E402

SRC = Path(lia.__file__).parent

# The seed-pinned desk-scale runs shared by the acceptance and CLI tests.
RUNS = {
    "m20": TrainConfig(seed=7),
    "m5": TrainConfig(seed=7, dict_size=5),
    "direct": TrainConfig(seed=7, use_dictionary=False),
}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@dataclass
class TrainedRun:
    config: TrainConfig
    checkpoint: Path
    log: Path
    seconds: float
    max_gram_error: float  # worst |D D^T - I| seen after any step
    orthonormal_checks: int
    all_finite: bool

    def metrics(self):
        return parse_metrics(self.log)


def _run_key(config: TrainConfig) -> str:
    h = hashlib.sha256(json.dumps(dataclasses.asdict(config), sort_keys=True).encode())
    h.update(torch.__version__.encode())
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _train(config: TrainConfig, folder: Path) -> dict:
    folder.mkdir(parents=True, exist_ok=True)
    eye = torch.eye(config.dict_size, dtype=torch.float64)
    stats = {"max_gram_error": 0.0, "orthonormal_checks": 0, "all_finite": True}

    def check(state, result):
        stats["all_finite"] &= all(math.isfinite(v) for v in result.floats().values())
        if config.use_dictionary:
            with torch.no_grad():
                d = state.model.directions().double()
            stats["max_gram_error"] = max(stats["max_gram_error"], float((d @ d.T - eye).abs().max()))
            stats["orthonormal_checks"] += 1

    start = time.perf_counter()
    cmd_train(config, folder / "model.ckpt", folder / "model.log", on_step=check)
    stats["seconds"] = time.perf_counter() - start
    return stats


@pytest.fixture(scope="session")
def trained(request):
    """Return the named desk-scale run, training it unless an identical one is cached.

    The cache key covers the config and every package source file, so any
    code change retrains from scratch.
    """
    root = Path(request.config.cache.mkdir("lia-runs"))
    memo = {}

    def get(name: str) -> TrainedRun:
        if name not in memo:
            config = RUNS[name]
            folder = root / f"{name}-{_run_key(config)}"
            meta = folder / "run.json"
            if not meta.exists():
                meta_data = _train(config, folder)
                meta.write_text(json.dumps(meta_data))
            stats = json.loads(meta.read_text())
            memo[name] = TrainedRun(config, folder / "model.ckpt", folder / "model.log", **stats)
        return memo[name]

    return get


# -- acceptance reporting --------------------------------------------------------

_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} -- {detail}"
        _VERDICTS[request.node.nodeid] = line
        print(line)
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and report.failed and "verdict" in item.fixturenames and item.nodeid not in _VERDICTS:
        _VERDICTS[item.nodeid] = f"{item.name} FAIL: raised before reporting ({call.excinfo.typename})"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS.values():
            terminalreporter.write_line(line)
