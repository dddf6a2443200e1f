"""Full segmentation model assembled according to an ablation preset."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .align import AlignProjParams, downsample_mask, total_alignment_loss, trace_embeddings
from .autodiff import Tensor
from .config import AblationConfig, RunConfig
from .decoder import CatLevelParams, LgffLevelParams, decode_pyramid, segmentation_head
from .encoders import TextEncoderParams, VisualEncoderParams, encode_text, encode_visual
from .errors import ConfigError
from .mmvt import ModalTokenBundle, MmvtParams, map_to_tokens, mmvt_forward, tokens_to_map
from .nn import Conv, ParamStore, mlp_block
from .world import ClipSample


@dataclass
class ForwardResult:
    logits: Tensor  # [T, 1, H1, W1]
    probs: Tensor  # [T, 1, H, W]
    trace: object
    cls: Tensor
    aux_logits: tuple = ()


class SegModel:
    """Encoders, fusion (MMVT or concatenation), decoder and head for one preset."""

    def __init__(self, cfg: RunConfig, abl: AblationConfig):
        self.cfg, self.abl = cfg, abl
        if abl.lgff is False and abl.align:
            raise ConfigError("the alignment loss needs the LGFF decoder trace")
        c = cfg.channels
        store = self.store = ParamStore(cfg.seed)
        self.enc_a = VisualEncoderParams.create(store, "enc_a", 3, cfg.enc_widths, c, cfg.aspp_dilations)
        self.enc_m = VisualEncoderParams.create(store, "enc_m", 2, cfg.enc_widths, c, cfg.aspp_dilations) if abl.motion else None
        self.text = TextEncoderParams.create(store, "text", cfg.text_embed, c, cfg.text_len)
        n_top = 2 + int(abl.motion)  # appearance, [motion], language
        self.top_fuse = None
        self.mmvt = None
        if abl.mmvt:
            if abl.cat_plus_ta:
                self.top_fuse = Conv.create(store, "top_fuse", n_top * c, c, k=3)
            self.mmvt = MmvtParams.create(store, "mmvt", c, cfg.heads, cfg.layers, cfg.mlp_ratio,
                                          cma=not abl.cat_plus_ta, ta=not abl.cma_only)
        else:
            self.top_fuse = Conv.create(store, "top_fuse", n_top * c, c, k=3)
        w = cfg.enc_widths
        c_m = lambda i: w[i] if abl.motion else None  # noqa: E731
        if abl.lgff:
            self.levels = [LgffLevelParams.create(store, f"dec.l{i + 1}", w[i], c_m(i), c) for i in range(3)]
        elif abl.cat_decoder:
            self.levels = [CatLevelParams.create(store, f"dec.l{i + 1}", w[i], c_m(i), c, True) for i in range(3)]
        else:
            self.levels = [CatLevelParams.create(store, f"dec.l{i + 1}", w[i], None, c, False) for i in range(3)]
        self.head = Conv.create(store, "head", c, 1, k=1)
        self.align = AlignProjParams.create(store, "align", c, cfg.embed_dim, abl.motion) if abl.align else None
        self.aux = None
        if abl.aux_bce:
            self.aux = (Conv.create(store, "aux_a", c, 1, k=1), Conv.create(store, "aux_m", c, 1, k=1) if abl.motion else None)

    # -- parameters -----------------------------------------------------
    @property
    def params(self) -> dict:
        return self.store.tensors

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, tensors: dict) -> None:
        mine = self.params
        if set(mine) != set(tensors):
            missing, extra = sorted(set(mine) - set(tensors)), sorted(set(tensors) - set(mine))
            raise ConfigError(f"checkpoint tensors do not match model: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in tensors.items():
            if mine[k].shape != arr.shape:
                raise ConfigError(f"parameter {k}: model shape {mine[k].shape} vs checkpoint shape {arr.shape}")
        for k, arr in tensors.items():
            mine[k].data = np.array(arr, dtype=np.float64)

    # -- forward ----------------------------------------------------------
    def forward(self, clip: ClipSample) -> ForwardResult:
        cfg, abl = self.cfg, self.abl
        frames = Tensor(clip.frames)
        pyr_a, top_a = encode_visual(frames, self.enc_a)
        pyr_m = top_m = None
        if abl.motion:
            pyr_m, top_m = encode_visual(Tensor(clip.flows), self.enc_m)
        z_l, cls = encode_text(clip.token_ids, self.text)
        t, c, h4, w4 = top_a.shape

        def concat_fuse():
            tiled = ad.broadcast_to(ad.reshape(cls, (1, c, 1, 1)), (t, c, h4, w4))
            parts = [top_a] + ([top_m] if abl.motion else []) + [tiled]
            return ad.relu(self.top_fuse(ad.concat(parts, axis=1)))

        if self.mmvt is None:
            top = concat_fuse()
        else:
            z_a = map_to_tokens(concat_fuse() if abl.cat_plus_ta else top_a)
            z_m = map_to_tokens(top_m) if abl.motion else None
            out_a, _, _ = mmvt_forward(ModalTokenBundle(z_a, z_m, z_l), self.mmvt)
            top = tokens_to_map(out_a, h4, w4)
        f1, trace = decode_pyramid(pyr_a, pyr_m, top, cls, self.levels)
        factor = cfg.canvas // f1.shape[-1]
        logits, probs = segmentation_head(f1, self.head, factor)
        aux = ()
        if self.aux is not None:
            aux = tuple(conv(src[1]) for conv, src in zip(self.aux, (trace.f_ea, trace.f_em)) if conv is not None)
        return ForwardResult(logits, probs, trace, cls, aux)

    def loss(self, clip: ClipSample, out: ForwardResult | None = None, rng: np.random.Generator | None = None) -> tuple:
        """Return ``(total, parts)`` with ``L_seg + w_align * L_align (+ aux BCE)``."""
        out = out or self.forward(clip)
        target = clip.gt_masks[:, None].astype(np.float64)
        seg = ad.binary_cross_entropy(out.probs, target)
        parts = {"seg": seg.item()}
        total = seg
        level1 = out.logits.shape[-1]
        small = downsample_mask(clip.gt_masks, self.cfg.canvas // level1) if (self.align or self.aux) else None
        if self.align is not None:
            rng = rng or np.random.default_rng(0)
            f_a = trace_embeddings(out.trace, "appearance", self.align.app)
            f_m = trace_embeddings(out.trace, "motion", self.align.mot) if self.abl.motion else None
            f_l = mlp_block(out.cls, self.align.lang)
            la, terms = total_alignment_loss(f_a, f_m, f_l, small.reshape(small.shape[0], -1), rng,
                                             self.cfg.align_pairs, self.abl.align_terms, self.cfg.align_reduction)
            total = total + la * self.cfg.align_weight
            parts["align"] = la.item()
            parts.update({f"align_{k}": v for k, v in terms.items()})
        if out.aux_logits:
            tgt = small[:, None].astype(np.float64)
            aux = [ad.bce_with_logits(lg, tgt) for lg in out.aux_logits]
            la = aux[0] if len(aux) == 1 else aux[0] + aux[1]
            total = total + la * self.cfg.aux_bce_weight
            parts["aux_bce"] = la.item()
        parts["total"] = total.item()
        return total, parts

    def predict(self, clip: ClipSample) -> np.ndarray:
        """Boolean ``[T, H, W]`` masks at frame resolution."""
        return self.forward(clip).probs.data[:, 0] >= 0.5
