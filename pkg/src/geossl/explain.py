"""Gradient-weighted class activation maps and overlays.

For a chosen convolutional layer with activations ``A`` (K x h x w), the map
for class ``c`` is ``relu(sum_k alpha_k A_k)`` with ``alpha_k`` the spatial
mean of ``d score_c / d A_k``. It is upsampled bilinearly to the input size
and then min-max normalised, so a non-constant map always peaks at exactly 1.
A constant map normalises to all zeros.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image
from torch import nn

from ._util import atomic_write_bytes
from .errors import InvalidArgument, Unsupported


@dataclass
class CamHeatmap:
    values: np.ndarray  # H x W float64 in [0, 1]
    target_class: int
    source: str | None
    model_digest: str
    layer: str = ""


def model_digest(model: nn.Module, length: int = 16) -> str:
    """Hash of every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:length]


def default_layer(model: nn.Module) -> str:
    """The encoder trunk's output when there is one, else the last Conv2d."""
    convs = [n for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise Unsupported(f"{type(model).__name__} has no convolutional layers")
    if hasattr(model, "encoder") and hasattr(model.encoder, "backbone"):
        return "encoder.backbone"
    return convs[-1]


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32) if not torch.is_tensor(image) else image)
    x = x.float()
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise InvalidArgument(f"expected one 3 x H x W image, got shape {tuple(x.shape)}")
    return x


def normalize_map(cam: np.ndarray) -> np.ndarray:
    lo, hi = float(cam.min()), float(cam.max())
    if not hi > lo:
        return np.zeros_like(cam, dtype=np.float64)
    return ((cam - lo) / (hi - lo)).astype(np.float64)


def activation_map(model: nn.Module, image, class_index: int, layer: str | None = None,
                   source=None) -> CamHeatmap:
    """Grad-CAM heatmap of ``class_index`` for a single C x H x W image in [0, 1]."""
    layer = layer or default_layer(model)
    modules = dict(model.named_modules())
    if layer not in modules:
        raise InvalidArgument(f"no layer named {layer!r}")
    x = _as_batch(image)
    captured = {}

    def hook(_module, _inp, out):
        captured["a"] = out

    handle = modules[layer].register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            # gradients must reach the hooked activations even when the encoder is frozen
            x = x.clone().requires_grad_(True)
            logits = model(x)
            if not 0 <= class_index < logits.shape[1]:
                raise InvalidArgument(f"class_index {class_index} out of range for {logits.shape[1]} classes")
            a = captured.get("a")
            if a is None or a.ndim != 4:
                raise Unsupported(f"layer {layer!r} does not produce a convolutional feature map")
            (grad,) = torch.autograd.grad(logits[0, class_index], a)
    finally:
        handle.remove()
        model.train(was_training)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * a).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    values = normalize_map(np.clip(cam[0, 0].double().numpy(), 0.0, None))
    return CamHeatmap(values, int(class_index), None if source is None else str(source), model_digest(model), layer)


def quadrant_mass(values: np.ndarray, quadrant: int) -> float:
    """Share of total heatmap mass inside a quadrant (0=TL, 1=TR, 2=BL, 3=BR); 0 for an empty map."""
    total = float(values.sum())
    if total <= 0:
        return 0.0
    h, w = values.shape
    r0, c0 = (quadrant // 2) * (h // 2), (quadrant % 2) * (w // 2)
    return float(values[r0:r0 + h // 2, c0:c0 + w // 2].sum()) / total


# ---------------------------------------------------------------------------
# rendering


def _as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgument(f"expected an H x W x 3 image, got shape {img.shape}")
    return img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)


def blend(heatmap: CamHeatmap | np.ndarray, image, colormap: str = "jet", alpha: float = 0.5) -> np.ndarray:
    """``img * (1 - alpha*h) + cmap(h) * alpha*h`` as uint8; a zero heatmap returns the image."""
    h = heatmap.values if isinstance(heatmap, CamHeatmap) else np.asarray(heatmap, dtype=np.float64)
    img = _as_float_image(image)
    if h.shape != img.shape[:2]:
        raise InvalidArgument(f"heatmap {h.shape} does not match image {img.shape[:2]}")
    if not 0 <= alpha <= 1:
        raise InvalidArgument("alpha must lie in [0, 1]")
    colour = colormaps[colormap](h)[..., :3]
    w = (alpha * h)[..., None]
    out = img * (1 - w) + colour * w
    return np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def overlay(heatmap: CamHeatmap | np.ndarray, image, out_path, colormap: str = "jet", alpha: float = 0.5) -> Path:
    """Write the blended overlay as a PNG the size of ``image``."""
    out_path = Path(out_path)
    atomic_write_bytes(out_path, _png_bytes(blend(heatmap, image, colormap, alpha)))
    return out_path


def comparison_grid(rows, out_path, pad: int = 2) -> Path:
    """Tile rows of equally sized H x W x 3 uint8 panels into one PNG.

    The usual layout is one row per image: source | SSL-model CAM | baseline CAM.
    """
    rows = [list(r) for r in rows]
    if not rows or not rows[0]:
        raise InvalidArgument("nothing to tile")
    panels = [[np.asarray(p, dtype=np.uint8) for p in r] for r in rows]
    h, w = panels[0][0].shape[:2]
    ncols = max(len(r) for r in panels)
    if any(p.shape != (h, w, 3) for r in panels for p in r):
        raise InvalidArgument("all panels must share one H x W x 3 shape")
    grid = np.full((len(panels) * (h + pad) + pad, ncols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, r in enumerate(panels):
        for j, p in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = p
    out_path = Path(out_path)
    atomic_write_bytes(out_path, _png_bytes(grid))
    return out_path
