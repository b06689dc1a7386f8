import dataclasses

from necho.data import GenParams
from necho.harness.config import DataConfig, TrainConfig
from necho.model import ModelConfig


def tiny_config(**changes) -> TrainConfig:
    """20 patients on a 3x4 hierarchy (|C| = 12) with a narrow model; trains in seconds."""
    data = DataConfig(n_patients=20, n_parents=3, children_per_parent=4, max_words=256,
                      gen=GenParams(vocab_size=300, max_clusters=2))
    model = ModelConfig(d=16, d_word=8, d_note=16, heads=4, layers=1, d_ff=16)
    cfg = TrainConfig(max_epochs=3, ks=(5, 10), monitor_k=10, data=data, model=model)
    return dataclasses.replace(cfg, **changes)


# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
