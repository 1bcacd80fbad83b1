"""Tiny anchor-based one-stage detector, small enough to train on CPU.

The network splits into a feature extractor ``F`` (four conv blocks taking a
64x64 RGB image down to an 8x8 map) and a detection head ``C`` (per-anchor
class logits and box offsets at the 8x8 and a derived 4x4 scale, three anchor
shapes per cell).  A gradient reversal layer can be inserted at the F-to-C
junction: identity in the forward pass, gradient negation scaled by lambda in
the backward pass, which is what lets one backward realize a min-max game.

Initialization is He fan-in from a seeded numpy generator, so parameters are
a pure function of (config, seed).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F_nn

from .boxes import AnchorSet, Detections, anchor_grid, clip_boxes, decode_boxes, nms

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ArchConfig:
    """Architecture hyperparameters; the anchor count derives from these."""

    image_size: int = 64
    in_channels: int = 3
    num_classes: int = 3                       # foreground classes K
    widths: tuple[int, ...] = (16, 32, 64, 64)  # F conv block channels
    head_width: int = 64                        # channels of the 4x4 branch
    grid_sizes: tuple[int, ...] = (8, 4)
    anchor_sizes: tuple[tuple[float, ...], ...] = ((12.0, 17.0, 23.0), (28.0, 35.0, 44.0))
    background_bias: float = 2.0                # initial bias on the bg logit

    @property
    def shapes_per_cell(self) -> int:
        return len(self.anchor_sizes[0])

    @property
    def num_anchors(self) -> int:
        return sum(g * g * len(s) for g, s in zip(self.grid_sizes, self.anchor_sizes))

    def build_anchors(self) -> AnchorSet:
        return anchor_grid(self.image_size, self.grid_sizes, self.anchor_sizes)


@dataclass
class RawOutput:
    """Per-anchor head outputs for a batch: logits (B, n, K+1), offsets (B, n, 4)."""

    class_logits: torch.Tensor
    box_offsets: torch.Tensor

    @property
    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=-1)

    def image(self, i: int) -> "RawOutput":
        return RawOutput(self.class_logits[i : i + 1], self.box_offsets[i : i + 1])


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def reverse_gradient(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by -lam."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return _GradientReversal.apply(x, lam)


class TinyDetector(nn.Module):
    def __init__(self, arch: ArchConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.arch = arch or ArchConfig()
        a = self.arch
        w1, w2, w3, w4 = a.widths
        self.features = nn.Sequential(
            nn.Conv2d(a.in_channels, w1, 3, stride=1, padding=1), nn.ReLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w3, w4, 3, stride=2, padding=1), nn.ReLU(),
        )
        k1 = a.num_classes + 1
        per_cell = a.shapes_per_cell
        self.down = nn.Sequential(nn.Conv2d(w4, a.head_width, 3, stride=2, padding=1), nn.ReLU())
        self.cls_heads = nn.ModuleList([
            nn.Conv2d(w4, per_cell * k1, 3, padding=1),
            nn.Conv2d(a.head_width, per_cell * k1, 3, padding=1),
        ])
        self.loc_heads = nn.ModuleList([
            nn.Conv2d(w4, per_cell * 4, 3, padding=1),
            nn.Conv2d(a.head_width, per_cell * 4, 3, padding=1),
        ])
        self._init_params(seed)
        self.to(dtype)
        self.anchors = a.build_anchors()
        assert len(self.anchors) == a.num_anchors

    def _init_params(self, seed: int):
        """He fan-in normal weights, zero biases, background-prior cls bias."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        k1 = self.arch.num_classes + 1
        for name, p in self.named_parameters():
            if p.ndim == 4:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(p.shape))
                with torch.no_grad():
                    p.copy_(torch.from_numpy(w))
            else:
                with torch.no_grad():
                    p.zero_()
                if name.startswith("cls_heads"):
                    with torch.no_grad():
                        p.view(-1, k1)[:, 0] = self.arch.background_bias

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def feature_params(self):
        return list(self.features.parameters())

    def head_params(self):
        return (list(self.down.parameters()) + list(self.cls_heads.parameters())
                + list(self.loc_heads.parameters()))

    def loc_head_params(self):
        return list(self.loc_heads.parameters())

    def to_input(self, images: np.ndarray) -> torch.Tensor:
        """(B, H, W, 3) float array in [0, 1] -> network input tensor."""
        arr = np.ascontiguousarray(np.transpose(np.asarray(images), (0, 3, 1, 2)))
        return torch.from_numpy(arr).to(self.dtype)

    def _check_images(self, images: torch.Tensor):
        a = self.arch
        if images.ndim != 4 or images.shape[1] != a.in_channels or \
                images.shape[2] != a.image_size or images.shape[3] != a.image_size:
            raise ValueError(
                f"expected images of shape (B, {a.in_channels}, {a.image_size}, "
                f"{a.image_size}), got {tuple(images.shape)}")

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return self.features(images * 2.0 - 1.0)

    def head(self, feats: torch.Tensor, reverse_at_junction: bool = False,
             lam: float = 1.0) -> RawOutput:
        if reverse_at_junction:
            feats = reverse_gradient(feats, lam)
        maps = [feats, self.down(feats)]
        b = feats.shape[0]
        k1 = self.arch.num_classes + 1
        logits, offsets = [], []
        for m, cls_conv, loc_conv in zip(maps, self.cls_heads, self.loc_heads):
            c = cls_conv(m)
            l = loc_conv(m)
            # (B, A*D, H, W) -> (B, H, W, A, D) -> (B, H*W*A, D), matching anchor order
            c = c.permute(0, 2, 3, 1).reshape(b, -1, k1)
            l = l.permute(0, 2, 3, 1).reshape(b, -1, 4)
            logits.append(c)
            offsets.append(l)
        return RawOutput(torch.cat(logits, dim=1), torch.cat(offsets, dim=1))

    def forward(self, images: torch.Tensor, reverse_at_junction: bool = False,
                lam: float = 1.0) -> RawOutput:
        return self.head(self.extract_features(images), reverse_at_junction, lam)

    @torch.no_grad()
    def predict(self, images: np.ndarray, conf_thresh: float = 0.05,
                nms_iou: float = 0.45) -> list[tuple[Detections, Detections]]:
        """Run inference on a (B, H, W, 3) batch.

        Returns, per image, the full decoded detection set O (one entry per
        anchor, boxes clipped to the unit square) and its post-NMS subset O*.
        """
        raw = self.forward(self.to_input(images))
        return self.decode_raw(raw, conf_thresh, nms_iou)

    def decode_raw(self, raw: RawOutput, conf_thresh: float = 0.05,
                   nms_iou: float = 0.45) -> list[tuple[Detections, Detections]]:
        probs = raw.class_probs.detach().cpu().numpy().astype(np.float64)
        offsets = raw.box_offsets.detach().cpu().numpy().astype(np.float64)
        out = []
        for i in range(probs.shape[0]):
            boxes = clip_boxes(decode_boxes(self.anchors.boxes, offsets[i]))
            o = Detections(boxes, probs[i])
            o_star, _ = nms(o, nms_iou, conf_thresh)
            out.append((o, o_star))
        return out


# ---------------------------------------------------------------------------
# checkpoints: a zip of little-endian float32 arrays plus the arch config
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: TinyDetector, extra: dict | None = None):
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "arch": asdict(model.arch),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("format.json", json.dumps(meta, indent=1, sort_keys=True))
        for name, p in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, p.detach().cpu().numpy().astype("<f4"))
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> TinyDetector:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("format.json"))
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {meta['format_version']}")
        arch_raw = dict(meta["arch"])
        arch_raw["widths"] = tuple(arch_raw["widths"])
        arch_raw["grid_sizes"] = tuple(arch_raw["grid_sizes"])
        arch_raw["anchor_sizes"] = tuple(tuple(s) for s in arch_raw["anchor_sizes"])
        model = TinyDetector(ArchConfig(**arch_raw), dtype=dtype)
        state = {}
        for name in model.state_dict():
            arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
            state[name] = torch.from_numpy(arr).to(dtype)
        model.load_state_dict(state)
    return model
