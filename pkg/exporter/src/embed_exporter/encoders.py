"""Vision-language encoders behind one small interface.

`ClipEncoder` wraps the pretrained contrastive model's two branches
(ViT-B/16 variant by default) through `transformers`; it needs the
weights to be obtainable. `ToyShapeColorEncoder` is a transparent
hand-built stand-in that embeds crops by color and shape statistics and
words through a small lexicon, so the full export-and-mask pipeline can
run and be tested without any downloaded model.
"""

from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np
from PIL import Image


class Encoder(Protocol):
    dim: int

    def encode_image(self, crop: Image.Image) -> np.ndarray: ...

    def encode_words(self, words: Sequence[str]) -> np.ndarray: ...


DEFAULT_CLIP_MODEL = "openai/clip-vit-base-patch16"


class ClipEncoder:
    """Contrastive vision-language model branches via transformers."""

    def __init__(self, model: str = DEFAULT_CLIP_MODEL, device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(model).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model)
        self.device = device
        self.dim = int(self.model.config.projection_dim)

    def encode_image(self, crop: Image.Image) -> np.ndarray:
        inputs = self.processor(images=crop.convert("RGB"), return_tensors="pt")
        with self._torch.no_grad():
            feats = self.model.get_image_features(
                pixel_values=inputs["pixel_values"].to(self.device))
        return feats[0].cpu().numpy().astype(np.float64)

    def encode_words(self, words: Sequence[str]) -> np.ndarray:
        inputs = self.processor(text=list(words), return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self.model.get_text_features(
                input_ids=inputs["input_ids"].to(self.device),
                attention_mask=inputs["attention_mask"].to(self.device))
        return feats.cpu().numpy().astype(np.float64)


# the toy encoder's shared embedding space:
#   [0:8]   color fractions over the prototype palette
#   [8:12]  shape statistics (fill, elongation, top-heaviness, edge density)
#   [12:32] hashed subspace for words outside the lexicon
TOY_DIM = 32

_PALETTE = {
    "red": (210, 40, 40),
    "green": (40, 180, 70),
    "blue": (40, 80, 210),
    "yellow": (220, 210, 60),
    "orange": (230, 140, 40),
    "white": (240, 240, 240),
    "black": (25, 25, 25),
    "gray": (128, 128, 128),
}
_COLOR_NAMES = list(_PALETTE)

# category word -> (bbox fill, crop aspect, top-heaviness, edge density)
_SHAPE_LEXICON = {
    "box": (1.0, 0.5, 0.5, 0.0),
    "bar": (1.0, 0.82, 0.5, 0.0),
    "disc": (0.8, 0.5, 0.5, 0.05),
    "wedge": (0.5, 0.5, 0.35, 0.04),
}


class ToyShapeColorEncoder:
    """Rule-based aligned embedding: crops by pixel statistics, words by lexicon.

    Color and category words land near crops that actually show that color
    or shape; everything else hashes into a subspace nearly orthogonal to
    the visual statistics, so spatial phrasing scores low by construction.
    """

    dim = TOY_DIM

    def encode_image(self, crop: Image.Image) -> np.ndarray:
        rgb = np.asarray(crop.convert("RGB"), dtype=np.float64)
        if rgb.size == 0:
            raise ValueError("empty crop")
        pixels = rgb.reshape(-1, 3)
        palette = np.asarray(list(_PALETTE.values()), dtype=np.float64)
        nearest = np.argmin(
            ((pixels[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2), axis=1)
        gray_idx = _COLOR_NAMES.index("gray")
        foreground = nearest != gray_idx

        vec = np.zeros(TOY_DIM)
        fg_count = int(foreground.sum())
        if fg_count:
            counts = np.bincount(nearest[foreground], minlength=len(_PALETTE))
            vec[:8] = counts / fg_count
        h, w = rgb.shape[:2]
        mask = foreground.reshape(h, w)
        aspect = w / (w + h)
        if fg_count:
            ys, xs = np.nonzero(mask)
            span_x = xs.max() - xs.min() + 1
            span_y = ys.max() - ys.min() + 1
            bbox_fill = fg_count / (span_x * span_y)
            top_heavy = 1.0 - (ys.mean() + 0.5) / h
            interior = mask[1:-1, 1:-1]
            edges = (mask[1:-1, 1:-1] != mask[:-2, 1:-1]).sum() + \
                (mask[1:-1, 1:-1] != mask[1:-1, :-2]).sum()
            edge_density = edges / max(interior.size, 1)
        else:
            bbox_fill, top_heavy, edge_density = 0.0, 0.5, 0.0
        vec[8:12] = (bbox_fill, aspect, top_heavy, edge_density)
        return vec

    def encode_words(self, words: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(words), TOY_DIM))
        for i, word in enumerate(words):
            w = word.lower()
            if w in _PALETTE:
                out[i, _COLOR_NAMES.index(w)] = 1.0
            elif w in _SHAPE_LEXICON:
                out[i, 8:12] = _SHAPE_LEXICON[w]
            else:
                # stable hash into the reserved subspace
                digest = np.frombuffer(hashlib.sha256(w.encode()).digest()[:20],
                                       dtype=np.uint8).astype(np.float64)
                out[i, 12:] = digest / np.linalg.norm(digest)
        return out


def make_encoder(name: str) -> Encoder:
    if name == "toy":
        return ToyShapeColorEncoder()
    return ClipEncoder(model=name)
