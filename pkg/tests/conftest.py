"""Shared fixtures and the per-criterion acceptance summary."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest
import torch

from pretune.config import desk_profile
from pretune.data import CohortData
from pretune.volume import GeneratorSettings, generate_cohort, split_dataset

torch.set_num_threads(1)

CRITERIA = {
    1: "loss oracle suite",
    2: "gradient checks",
    3: "paper-constant fidelity",
    4: "diffusion schedule and sampler",
    5: "LoRA identity, merge and counts",
    6: "freeze soundness and top fraction",
    7: "adversarial cadence",
    8: "convergence smoke tests",
    9: "metric oracles",
    10: "end-to-end desk grid and determinism",
    11: "expected trend: scratch vs fine-tuned (non-gating)",
}
NON_GATING = {11}

_outcomes: dict[int, list[str]] = defaultdict(list)
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append(report.outcome)
    for key, value in report.user_properties if report.when == "call" else ():
        if key == "acceptance_note":
            _notes[n].append(value)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = int(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            tr.write_line(f"criterion {n:>2} [{title}]: NOT RUN")
            continue
        ok = all(r == "passed" for r in results)
        status = "PASS" if ok else "FAIL"
        if n in NON_GATING:
            status = f"REPORTED ({'ran' if ok else 'errored'})"
        tr.write_line(f"criterion {n:>2} [{title}]: {status} ({results.count('passed')}/{len(results)} tests)")
        for note in _notes.get(n, []):
            tr.write_line(f"    {note}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    return desk_profile()


@pytest.fixture(scope="session")
def desk_models(desk):
    return desk.models


@pytest.fixture(scope="session")
def small_data():
    """Twelve 20^3 subjects split 8/2/2 for quick training runs."""
    subjects = generate_cohort(12, GeneratorSettings(dims=(20, 20, 20)), seed=7)
    split = split_dataset([s.id for s in subjects], (0.7, 0.2, 0.1), seed=7)
    return CohortData.from_split(subjects, split)


@pytest.fixture(scope="session")
def desk_checkpoint(tmp_path_factory, desk, small_data):
    """One-epoch desk reconstruction pre-training checkpoint."""
    from pretune.pretrain import PretrainModels, run_pretrain

    out = tmp_path_factory.mktemp("pretrain_rec")
    cfg = replace(desk.pretrain, strategy="reconstruction", epochs=1, lr_step_epoch=1)
    ckpt, _ = run_pretrain(cfg, small_data, out, PretrainModels(desk.models.encoder, desk.models.diffusion, desk.models.discriminator))
    return ckpt
