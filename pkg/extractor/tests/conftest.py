"""Fixtures: tiny randomly initialized local encoders (no network access)."""

import os

import numpy as np
import pytest

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

from tinyspec import DEPTH, GROUP, HIDDEN  # noqa: F401


@pytest.fixture(scope="session")
def tiny_text_encoder(tmp_path_factory):
    import torch
    from transformers import BertConfig, BertModel, BertTokenizerFast

    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("models") / "tinybert"
    cfg = BertConfig(vocab_size=80, hidden_size=HIDDEN, num_hidden_layers=DEPTH,
                     num_attention_heads=2, intermediate_size=64,
                     max_position_embeddings=64)
    BertModel(cfg).save_pretrained(path)
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += [chr(c) for c in range(97, 123)]
    vocab += ["##" + chr(c) for c in range(97, 123)]
    vocab_file = path / "vocab_src.txt"
    vocab_file.write_text("\n".join(vocab))
    BertTokenizerFast(vocab_file=str(vocab_file)).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_image_encoder(tmp_path_factory):
    import torch
    from transformers import ViTConfig, ViTModel

    torch.manual_seed(1)
    path = tmp_path_factory.mktemp("models") / "tinyvit"
    cfg = ViTConfig(hidden_size=HIDDEN, num_hidden_layers=DEPTH,
                    num_attention_heads=2, intermediate_size=64,
                    image_size=32, patch_size=16, num_channels=3)
    ViTModel(cfg).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def item_images(tmp_path_factory):
    from PIL import Image

    rng = np.random.default_rng(7)
    folder = tmp_path_factory.mktemp("images")
    paths = []
    for i in range(12):
        arr = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
        p = folder / f"img{i}.png"
        Image.fromarray(arr).save(p)
        paths.append(str(p))
    return paths
