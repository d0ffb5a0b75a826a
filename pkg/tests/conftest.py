from __future__ import annotations

import sys
from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.backend.data.dataset import SyntheticSpec, generate_dataset  # noqa: E402
from src.backend.data.pretrain import pretrain_classifier  # noqa: E402

# Small enough for sub-second training, large enough for a 2-shot probe per class.
TINY_SPEC = {
    "latent_dim": 4,
    "img_dim": 6,
    "txt_dim": 5,
    "num_classes": 3,
    "num_pairs": 240,
    "noise_sigma": 0.1,
    "visible_dims": 4,
    "ood_classes": 1,
    "eval_fraction": 0.25,
    "seed": 0,
}
TINY_EMBED = 4
TINY_HIDDEN = 8


@pytest.fixture(autouse=True)
def isolated_runs_root(monkeypatch, tmp_path):
    monkeypatch.setenv("TRITOWER_HOME", str(tmp_path / "runs"))
    monkeypatch.setenv("APP_ENV", "development")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(SyntheticSpec(**TINY_SPEC))


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_dataset):
    return pretrain_classifier(
        tiny_dataset,
        steps=30,
        embed_dim=TINY_EMBED,
        hidden=TINY_HIDDEN,
        batch_size=32,
        seed=0,
    )
