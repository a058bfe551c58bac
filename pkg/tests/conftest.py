import pytest
import torch

from draglora.model import ToyUNet, ToyUNetConfig
from draglora.schedule import build_schedule

TINY = ToyUNetConfig(image_size=16, base_width=8, level_mults=(1, 2),
                     attn_levels=(1,), mid_attn=True, emb_dim=32,
                     feature_layer="dec.0")

# conv-only single-level config: finite receptive field, no attention
LOCAL = ToyUNetConfig(image_size=32, base_width=8, level_mults=(1,),
                      attn_levels=(), mid_attn=False, emb_dim=32,
                      feature_layer="dec.0", norm=False)


@pytest.fixture(scope="session")
def sched():
    return build_schedule(1000, 1e-4, 0.02, 50)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return ToyUNet(TINY)


@pytest.fixture()
def local_model():
    torch.manual_seed(1)
    return ToyUNet(LOCAL)
