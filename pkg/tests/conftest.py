import pytest
import torch

from twinseg.config import (DataConfig, EvalConfig, ModelConfig, RunConfig,
                            SupervisionConfig, SyntheticSpec)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_config(**kw) -> RunConfig:
    """Small everything: fast to train, still exercises every stage."""
    cfg = RunConfig(
        supervision=SupervisionConfig(warmup_c2s=3, warmup_s2c=5, bsp_start=5),
        model=ModelConfig(widths=(8, 8, 16, 16), decoder_dim=16, attn_heads=4),
        data=DataConfig(
            synthetic=SyntheticSpec(canvas=(32, 32), train_count=12, val_count=4),
            crop=32,
        ),
        eval=EvalConfig(cadence=1000, scales=(1.0,), flip=False),
        total_iterations=10,
        batch_size=2,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()
