"""Run frozen text/vision encoders over a manifest and cache pooled layers.

Per item and modality the cache holds the classification-token hidden
state of the embedding layer plus every g-th transformer layer: with a
12-layer encoder and g=6 that is l_0, l_6, l_12. Extraction is inference
only (eval mode, no grad) over fixed-order batches, so repeated runs on
the same hardware produce identical bytes.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from transformers import AutoModel, AutoTokenizer

from .manifest import load_manifest
from .xsmf import write_xsmf

MAX_TEXT_TOKENS = 40

# plain ViT-style preprocessing: resize, scale to [0,1], normalize with 0.5
_IMAGE_MEAN = 0.5
_IMAGE_STD = 0.5


@dataclass
class ExtractionResult:
    item_ids: list
    visual: np.ndarray   # (items, M+1, d_v)
    textual: np.ndarray  # (items, M+1, d_t)
    rejects: list = field(default_factory=list)  # (item_id, reason)


def _kept_layer_indices(depth, group_factor):
    if depth % group_factor != 0:
        raise ValueError(f"group factor {group_factor} does not divide depth {depth}")
    return list(range(0, depth + 1, group_factor))


def _pool_cls(hidden_states, kept):
    """Stack the position-0 token of each kept layer: (batch, len(kept), d)."""
    return torch.stack([hidden_states[k][:, 0, :] for k in kept], dim=1)


def _load_pixels(path, image_size):
    img = Image.open(path).convert("RGB").resize((image_size, image_size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - _IMAGE_MEAN) / _IMAGE_STD
    return torch.from_numpy(arr.transpose(2, 0, 1))


def extract(manifest_path, text_encoder, image_encoder, group_factor,
            out_textual, out_visual, batch_size=8, device="cpu",
            expected_dim=None, rejects_path=None) -> ExtractionResult:
    """Extract both modalities for every usable manifest item.

    Items with empty text or an unreadable image are skipped entirely and
    listed in the rejects file, keeping the two caches aligned.
    """
    items = load_manifest(manifest_path)
    tokenizer = AutoTokenizer.from_pretrained(text_encoder)
    text_model = AutoModel.from_pretrained(text_encoder).to(device).eval()
    image_model = AutoModel.from_pretrained(image_encoder).to(device).eval()

    for name, model in (("text", text_model), ("image", image_model)):
        width = model.config.hidden_size
        if expected_dim is not None and width != expected_dim:
            raise ValueError(
                f"{name} encoder width {width} != expected dim {expected_dim}"
            )

    text_kept = _kept_layer_indices(text_model.config.num_hidden_layers, group_factor)
    image_kept = _kept_layer_indices(image_model.config.num_hidden_layers, group_factor)
    if len(text_kept) != len(image_kept):
        raise ValueError(
            f"encoders disagree on cached depth: {len(text_kept)} vs {len(image_kept)}"
        )
    image_size = image_model.config.image_size

    usable = []
    rejects = []
    for it in items:
        if not it.text.strip():
            rejects.append((it.item_id, "empty text"))
            continue
        try:
            pixels = _load_pixels(it.image_path, image_size)
        except (OSError, ValueError) as exc:
            rejects.append((it.item_id, f"unreadable image: {exc}"))
            continue
        usable.append((it, pixels))

    tex_parts = []
    vis_parts = []
    with torch.no_grad():
        for lo in range(0, len(usable), batch_size):
            batch = usable[lo:lo + batch_size]
            enc = tokenizer(
                [it.text for it, _ in batch], truncation=True,
                max_length=MAX_TEXT_TOKENS, padding=True, return_tensors="pt",
            ).to(device)
            t_out = text_model(**enc, output_hidden_states=True)
            tex_parts.append(_pool_cls(t_out.hidden_states, text_kept).cpu())

            pixels = torch.stack([p for _, p in batch]).to(device)
            v_out = image_model(pixel_values=pixels, output_hidden_states=True)
            vis_parts.append(_pool_cls(v_out.hidden_states, image_kept).cpu())

    ids = [it.item_id for it, _ in usable]
    textual = (torch.cat(tex_parts).to(torch.float32).numpy()
               if tex_parts else np.zeros((0, len(text_kept),
                                           text_model.config.hidden_size), np.float32))
    visual = (torch.cat(vis_parts).to(torch.float32).numpy()
              if vis_parts else np.zeros((0, len(image_kept),
                                          image_model.config.hidden_size), np.float32))

    write_xsmf(out_textual, "textual", ids, textual)
    write_xsmf(out_visual, "visual", ids, visual)
    if rejects_path:
        with open(rejects_path, "w", encoding="utf-8") as fh:
            for iid, reason in rejects:
                fh.write(f"{iid}\t{reason}\n")
    elif rejects:
        names = ", ".join(iid for iid, _ in rejects[:10])
        print(f"skipped {len(rejects)} items ({names})")
    return ExtractionResult(ids, visual, textual, rejects)
