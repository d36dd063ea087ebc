import pytest

from clipose.synthdata import DataConfig, generate_split
from clipose.training import ModelConfig, PretrainConfig, TrainConfig

# filled by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []

TINY_DATA = DataConfig(n_points=64, patch_size=16, dense_points=512)


def tiny_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        batch_size=6, base_lr=1e-3, epochs=2, eval_interval=1,
        model=ModelConfig(embed_dim=16, image_size=16, image_patch=4, image_dim=16, text_dim=16,
                          point_width=8, head_hidden=16, head_vote_hidden=8),
        pretrain=PretrainConfig(steps=0, batch_size=12, eval_every=5, pool_per_category=4),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset():
    return {"train": generate_split(2, 0, TINY_DATA, "train"),
            "test": generate_split(1, 0, TINY_DATA, "test")}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
