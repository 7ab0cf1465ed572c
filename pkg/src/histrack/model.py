"""Network: toy frame encoder, temporal-blocking decoder stack, refinement modules.

Attention is dense dot-product attention. Decoder cross-attention carries a
learnable per-head Gaussian distance bias around each query's anchor, which
stands in for the locality that deformable attention gets from sampling
around a reference point.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import BoundingBox, Config, Prediction
from .masks import decoder_mask_from_groups, irm_mask

_EPS = 1e-5


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    x = x.clamp(_EPS, 1 - _EPS)
    return torch.log(x) - torch.log1p(-x)


def sine_embed(values: torch.Tensor, dim: int, temperature: float = 100.0) -> torch.Tensor:
    """Sinusoidal embedding of each coordinate in ``values[..., k]`` into ``dim // k`` channels."""
    n_coord = values.shape[-1]
    per = dim // n_coord
    half = per // 2
    freq = temperature ** (torch.arange(half, dtype=values.dtype, device=values.device) / max(half, 1))
    angles = values[..., None] * (2 * math.pi) / freq
    emb = torch.cat([angles.sin(), angles.cos()], dim=-1)
    return emb.flatten(-2)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, value, allow: Optional[torch.Tensor] = None,
                bias: Optional[torch.Tensor] = None, key_index=None) -> torch.Tensor:
        """Unbatched attention.

        With ``key_index``, ``key`` and ``value`` are ``(S, L, d)`` stacks and
        query ``i`` attends only to stack ``key_index[i]``; ``allow`` is
        ignored in that mode and ``bias`` is ``(heads, Lq, L)``.
        """
        lq, d = query.shape
        h, dh = self.heads, d // self.heads
        if key_index is not None:
            # pad queries per stack so each stack is one dense batched product
            s, lk = key.shape[:2]
            key_index = torch.as_tensor(key_index, dtype=torch.long)
            order = torch.argsort(key_index, stable=True)
            counts = torch.bincount(key_index, minlength=s)
            width = max(1, int(counts.max()))
            starts = torch.cumsum(counts, 0) - counts
            slot = torch.empty_like(key_index)
            slot[order] = key_index[order] * width + torch.arange(lq) - starts[key_index[order]]
            src = torch.zeros(s * width, dtype=torch.long)
            src[slot] = torch.arange(lq)
            q = self.q(query)[src].view(s, width, h, dh).transpose(1, 2)
            k = self.k(key).view(s, lk, h, dh).transpose(1, 2)
            v = self.v(value).view(s, lk, h, dh).transpose(1, 2)
            scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
            if bias is not None:
                scores = scores + bias[:, src].view(h, s, width, lk).transpose(0, 1)
            out = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(s * width, d)[slot]
            return self.out(out)
        lk = key.shape[0]
        q = self.q(query).view(lq, h, dh).transpose(0, 1)
        k = self.k(key).view(lk, h, dh).transpose(0, 1)
        v = self.v(value).view(lk, h, dh).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(dh)
        if bias is not None:
            scores = scores + bias
        if allow is not None:
            scores = scores.masked_fill(~allow, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(lq, d)
        return self.out(out)


@dataclass
class FrameFeatures:
    tokens: torch.Tensor
    pos: torch.Tensor
    centers: torch.Tensor
    proposal_anchors: torch.Tensor
    proposal_content: torch.Tensor
    objectness: torch.Tensor
    token_boxes: torch.Tensor
    proposal_index: torch.Tensor
    # which image each token came from when several frames are merged
    token_segment: Optional[np.ndarray] = None


def merge_frames(frames: list[FrameFeatures]) -> FrameFeatures:
    """Concatenate several frames' tokens so unrelated queries can share one decoder pass."""
    cat = lambda name: torch.cat([getattr(f, name) for f in frames])
    seg = np.concatenate([np.full(len(f.tokens), k) for k, f in enumerate(frames)])
    return FrameFeatures(cat("tokens"), cat("pos"), cat("centers"), cat("proposal_anchors"),
                         cat("proposal_content"), cat("objectness"), cat("token_boxes"),
                         cat("proposal_index"), seg)


class FrameEncoder(nn.Module):
    """Strided conv stack with sinusoidal positions and top-k token proposals."""

    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        d = config.feature_dim
        stages = int(round(math.log2(config.downsample)))
        if 2 ** stages != config.downsample:
            raise ValueError("downsample must be a power of two")
        chans = [3] + [max(8, d // 2 ** (stages - 1 - i)) for i in range(stages)]
        layers = []
        for i in range(stages):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.ReLU()]
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(chans[-1], d)
        self.norm = nn.LayerNorm(d)
        self.objectness = nn.Linear(d, 1)
        self.box = nn.Linear(d, 4)
        nn.init.zeros_(self.box.weight)
        with torch.no_grad():
            self.box.bias.copy_(torch.tensor([0.0, 0.0, -1.7, -1.7]))
        g = config.grid
        ys, xs = torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")
        self.register_buffer("cells", torch.stack([xs.flatten(), ys.flatten()], dim=-1).float(),
                             persistent=False)

    def forward(self, image, proposal_content: torch.Tensor) -> FrameFeatures:
        return self.forward_many([image], proposal_content)[0]

    def forward_many(self, images, proposal_content: torch.Tensor) -> list[FrameFeatures]:
        """Encode several ``(H, W, 3)`` uint8 images with one conv pass."""
        cfg = self.config
        expected = (cfg.image_size, cfg.image_size, 3)
        imgs = []
        for image in images:
            img = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image))
            if tuple(img.shape) != expected:
                raise ValueError(f"image shape {tuple(img.shape)} != expected {expected}")
            imgs.append(img)
        dtype = self.proj.weight.dtype
        x = (torch.stack(imgs).to(dtype) / 255.0 - 0.5).permute(0, 3, 1, 2)
        fmap = self.convs(x)
        tokens_all = self.norm(self.proj(fmap.flatten(2).transpose(1, 2)))
        g = cfg.grid
        cells = self.cells.to(dtype)
        centers = (cells + 0.5) / g
        pos = sine_embed(centers, cfg.feature_dim)
        raw = self.box(tokens_all)
        boxes_all = torch.cat([(cells + torch.sigmoid(raw[..., :2])) / g, torch.sigmoid(raw[..., 2:])], dim=-1)
        obj_all = self.objectness(tokens_all)[..., 0]
        orders = torch.argsort(-obj_all.detach(), dim=-1, stable=True)[:, : cfg.n_det]
        out = []
        for k in range(len(imgs)):
            order = orders[k]
            out.append(FrameFeatures(
                tokens=tokens_all[k], pos=pos, centers=centers,
                proposal_anchors=boxes_all[k][order], proposal_content=proposal_content,
                objectness=obj_all[k], token_boxes=boxes_all[k], proposal_index=order,
            ))
        return out


class DecoderLayer(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        d, h = config.feature_dim, config.d_head
        self.self_attn = MultiHeadAttention(d, h)
        self.cross_attn = MultiHeadAttention(d, h)
        self.ffn = nn.Sequential(nn.Linear(d, config.ffn_dim), nn.ReLU(), nn.Linear(config.ffn_dim, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        # heads spread from broad to tight spatial priors
        self.log_beta = nn.Parameter(torch.linspace(-3.0, 1.0, h))
        # same prior between queries keeps duplicate suppression local
        self.self_log_beta = nn.Parameter(torch.linspace(-3.0, 1.0, h))

    def spatial_bias(self, anchors, centers, log_beta=None):
        """``centers`` is ``(L, 2)`` shared by all queries or ``(Lq, L, 2)`` per query."""
        if centers.dim() == 2:
            centers = centers[None]
        diff = anchors[:, None, :2] - centers[..., :2]
        dist2 = (diff ** 2).sum(-1) / 0.02
        beta = (self.log_beta if log_beta is None else log_beta).exp()
        return -beta[:, None, None] * dist2[None]


@dataclass
class DecoderOutput:
    content: torch.Tensor
    logits: torch.Tensor
    boxes: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.softmax(-1)

    def predictions(self, rows=None) -> list[Prediction]:
        probs = self.logits.detach().double().softmax(-1).numpy()
        boxes = self.boxes.detach().double().numpy()
        idx = range(len(probs)) if rows is None else rows
        return [Prediction(probs[i], BoundingBox.from_array(boxes[i])) for i in idx]


class RefinementModule(nn.Module):
    """Intra-track information exchange with removal and addition branches.

    ``gate_override`` and ``zero_add`` are test hooks: the first replaces the
    removal gate with a constant (or tensor), the second zeroes the added
    features.
    """

    def __init__(self, config: Config):
        super().__init__()
        d, h = config.feature_dim, config.d_head
        self.groups = h
        self.rem_collect = MultiHeadAttention(d, h)
        self.rem_collect_norm = nn.LayerNorm(d)
        self.rem_action = MultiHeadAttention(d, h)
        self.gate = nn.Linear(d, h)
        self.add_collect = MultiHeadAttention(d, h)
        self.add_collect_norm = nn.LayerNorm(d)
        self.add_action = MultiHeadAttention(d, h)
        self.norm = nn.LayerNorm(d)
        self.gate_override = None
        self.zero_add = False

    def branches(self, content, allow):
        """Return the removal gate ``z`` (N x groups) and the added features (N x d)."""
        g_rem = self.rem_collect_norm(content + self.rem_collect(content, content, content, allow))
        z = torch.sigmoid(self.gate(self.rem_action(g_rem, content, content, allow)))
        g_add = self.add_collect_norm(content + self.add_collect(content, content, content, allow))
        f_add = self.add_action(g_add, content, content, allow)
        return z, f_add

    def forward(self, content: torch.Tensor, group_ids) -> torch.Tensor:
        n, d = content.shape
        if d % self.groups:
            raise ValueError(f"feature dim {d} not divisible by {self.groups} groups")
        if n == 0:
            return content
        allow = torch.as_tensor(irm_mask(np.asarray(group_ids)).allow)
        z, f_add = self.branches(content, allow)
        if self.gate_override is not None:
            z = torch.as_tensor(self.gate_override, dtype=content.dtype).expand(n, self.groups)
        if self.zero_add:
            f_add = torch.zeros_like(f_add)
        z_full = z.repeat_interleave(d // self.groups, dim=1)
        return self.norm(2.0 * content * (1.0 - z_full) + f_add)


class TrackerModel(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        d = config.feature_dim
        self.encoder = FrameEncoder(config)
        self.query_content = nn.Parameter(torch.randn(config.n_det, d) * 0.1)
        self.query_pos = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.num_decoders))
        self.irms = nn.ModuleDict({str(i): RefinementModule(config) for i in config.irm_positions})
        self.class_head = nn.Linear(d, config.num_classes + 1)
        self.box_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 4))
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)

    def encode_frame(self, image) -> FrameFeatures:
        return self.encoder(image, self.query_content)

    def encode_frames(self, images) -> list[FrameFeatures]:
        return self.encoder.forward_many(images, self.query_content)

    def decoder_layer_forward(self, index: int, content, anchors, allow, frame: FrameFeatures,
                              segment=None) -> DecoderOutput:
        layer = self.layers[index]
        n = content.shape[0]
        allow = torch.as_tensor(allow)
        if allow.shape != (n, n) or anchors.shape != (n, 4):
            raise ValueError(f"shape mismatch: content {tuple(content.shape)}, anchors "
                             f"{tuple(anchors.shape)}, mask {tuple(allow.shape)}")
        qpos = self.query_pos(sine_embed(anchors, self.config.feature_dim))
        q = content + qpos
        near = layer.spatial_bias(anchors, anchors, layer.self_log_beta)
        x = layer.norm1(content + layer.self_attn(q, q, content, allow, bias=near))
        if segment is None:
            bias = layer.spatial_bias(anchors, frame.centers)
            x = layer.norm2(x + layer.cross_attn(x + qpos, frame.tokens + frame.pos, frame.tokens, bias=bias))
        else:
            # merged frames: equal-size contiguous token blocks, one per segment
            seg = torch.as_tensor(segment)
            n_seg = int(frame.token_segment.max()) + 1
            keys = (frame.tokens + frame.pos).view(n_seg, -1, content.shape[1])
            vals = frame.tokens.view(n_seg, -1, content.shape[1])
            bias = layer.spatial_bias(anchors, frame.centers.view(n_seg, -1, 2)[seg])
            x = layer.norm2(x + layer.cross_attn(x + qpos, keys, vals, bias=bias, key_index=seg))
        x = layer.norm3(x + layer.ffn(x))
        boxes = torch.sigmoid(inverse_sigmoid(anchors) + self.box_head(x))
        return DecoderOutput(content=x, logits=self.class_head(x), boxes=boxes)

    def irm_forward(self, position: int, content, group_ids) -> torch.Tensor:
        return self.irms[str(position)](content, group_ids)

    def forward_frame(self, content, anchors, group_id, n_tracking: int,
                      frame: FrameFeatures, segment=None) -> list[DecoderOutput]:
        """Run the decoder stack; refinement modules touch only the first ``n_tracking`` rows.

        With ``segment`` (one entry per row) the rows belong to independent
        frames merged by :func:`merge_frames`: rows only see rows of their own
        segment and that segment's tokens. Group ids must then be unique
        across segments.
        """
        group_id = np.asarray(group_id)
        is_tracking = np.arange(len(group_id)) < n_tracking
        allow_np = decoder_mask_from_groups(group_id, is_tracking).allow
        if segment is not None:
            segment = np.asarray(segment)
            allow_np = allow_np & (segment[:, None] == segment[None, :])
        allow = torch.as_tensor(allow_np)
        outputs = []
        for i in range(len(self.layers)):
            if str(i) in self.irms and n_tracking > 0:
                refined = self.irms[str(i)](content[:n_tracking], group_id[:n_tracking])
                content = torch.cat([refined, content[n_tracking:]])
            out = self.decoder_layer_forward(i, content, anchors, allow, frame, segment)
            outputs.append(out)
            content, anchors = out.content, out.boxes
        return outputs


def save_checkpoint(path, model: TrackerModel, extra: Optional[dict] = None) -> None:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = {"config": model.config.to_dict(), "dtype": str(next(model.parameters()).dtype)}
    if extra:
        meta["extra"] = extra
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, **overrides) -> TrackerModel:
    """Rebuild a model from disk; ``overrides`` adjust inference-only config fields."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        config = Config.from_dict({**meta["config"], **overrides})
        model = TrackerModel(config)
        if meta["dtype"] == "torch.float64":
            model = model.double()
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["__meta__"]))
