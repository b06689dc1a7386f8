"""The full network: encoders -> projectors -> CMTs/SAs -> gate -> head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DEMO_SIZES, Batch
from .encoders import (CodeEncoder, DemographicsEncoder, HierarchyHead, NoteEncoder,
                       scatter_visits)
from .fusion import (AdaptationGate, ConcatFusion, CrossModalTransformer, PredictionHead,
                     SelfAttentionStream, TemporalProjector, code_residual)
from .tensor import ops
from .tensor.core import Tensor
from .tensor.nn import Dropout, Module

MODALITIES = ("C", "H", "W")


@dataclass
class ModelConfig:
    d: int = 256
    d_word: int = 200
    d_note: int = 512
    filters: tuple = (2, 3, 4)
    heads: int = 4
    layers: int = 3
    d_ff: int = 256
    dropout: float = 0.1
    causal: bool = True
    projector_width: int = 1
    pooling: str = "mean"  # patient-level contrastive representation: mean | last
    freeze_word_embeddings: bool = False
    # structural ablations
    drop_code: bool = False
    drop_demo: bool = False
    drop_note: bool = False
    no_transformers: bool = False
    no_mag: bool = False
    no_code_centring: bool = False

    def dropped(self) -> set:
        return {m for m, flag in zip(MODALITIES, (self.drop_code, self.drop_demo, self.drop_note)) if flag}

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.pooling not in ("mean", "last"):
            raise ValueError(f"pooling must be 'mean' or 'last', got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if len(self.dropped()) == 3:
            raise ValueError("cannot drop every modality")


@dataclass
class ForwardOutput:
    y_hat: Tensor  # (B, T, |C|) next-visit leaf probabilities
    o_hat: dict  # modality -> (B, T, |A|) parent probabilities
    reps: dict  # modality -> (B, d) patient-level projected representation
    streams: dict = field(default_factory=dict)  # intermediate tensors, for inspection


def pool_visits(x: Tensor, mask: np.ndarray, how: str = "mean") -> Tensor:
    """Patient-level vector from a ``(B, T, d)`` stream over real visits."""
    mask = np.asarray(mask, dtype=float)
    if how == "last":
        last = np.zeros_like(mask)
        last[np.arange(mask.shape[0]), mask.sum(axis=1).astype(int) - 1] = 1.0
        return ops.sum(ops.mul(x, last[..., None]), axis=1)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return ops.sum(ops.mul(x, (mask / counts)[..., None]), axis=1)


class NECHO(Module):
    def __init__(self, cfg: ModelConfig, n_codes: int, n_parents: int, vocab: int,
                 demo_sizes: Sequence[int] = DEMO_SIZES, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        drop = Dropout(cfg.dropout, self._dropout_rng)
        self._drop = drop
        d = cfg.d
        self.code_encoder = CodeEncoder(n_codes, d, rng, drop)
        self.demo_encoder = DemographicsEncoder(demo_sizes, d, rng, drop)
        self.note_encoder = NoteEncoder(vocab, cfg.d_word, cfg.d_note, d, cfg.filters, rng, drop,
                                        freeze_words=cfg.freeze_word_embeddings)
        self.hierarchy_heads = {m: HierarchyHead(d, n_parents, rng) for m in MODALITIES}
        self.projectors = {m: TemporalProjector(d, rng, cfg.projector_width) for m in MODALITIES}
        self.cmt = {m: CrossModalTransformer(d, cfg.heads, cfg.layers, cfg.d_ff, rng, drop) for m in ("H", "W")}
        self.sa = {m: SelfAttentionStream(d, cfg.heads, cfg.layers, cfg.d_ff, rng, drop) for m in MODALITIES}
        self.mag = AdaptationGate(d, rng, drop)
        self.concat_fusion = ConcatFusion(d, rng, drop)
        self.head = PredictionHead(d, n_codes, rng)
        self.n_codes, self.n_parents = n_codes, n_parents

    def reseed_dropout(self, seed: int) -> None:
        self._dropout_rng.bit_generator.state = np.random.default_rng(seed).bit_generator.state

    def encode(self, batch: Batch) -> dict:
        """Modality features ``(B, T, d)`` for every modality that is not dropped."""
        dropped = self.cfg.dropped()
        feats = {}
        if "C" not in dropped:
            feats["C"] = self.code_encoder(batch.codes)
        if "H" not in dropped:
            feats["H"] = self.demo_encoder(batch.demographics)
        if "W" not in dropped:
            feats["W"] = scatter_visits(self.note_encoder(batch.notes, batch.note_mask), batch.note_slot)
        return feats

    def __call__(self, batch: Batch) -> ForwardOutput:
        cfg = self.cfg
        mask = batch.mask
        maskf = mask[..., None].astype(float)
        B, T = mask.shape
        feats = self.encode(batch)
        o_hat = {m: self.hierarchy_heads[m](f) for m, f in feats.items()}

        # projected streams, padded visits zeroed; dropped modalities are zeros
        proj = {}
        for m in MODALITIES:
            if m in feats:
                proj[m] = ops.mul(self.projectors[m](feats[m]), maskf)
            else:
                proj[m] = Tensor(np.zeros((B, T, cfg.d)))

        if cfg.no_transformers:
            y_c, y_h, y_w = proj["C"], proj["H"], proj["W"]
        else:
            z_h = self.cmt["H"](proj["C"], proj["H"], mask, cfg.causal)
            z_w = self.cmt["W"](proj["C"], proj["W"], mask, cfg.causal)
            y_c = self.sa["C"](proj["C"], mask, cfg.causal)
            y_h = self.sa["H"](z_h, mask, cfg.causal)
            y_w = self.sa["W"](z_w, mask, cfg.causal)
            if not cfg.no_code_centring:
                y_c = code_residual(y_c, proj["C"])

        if cfg.no_mag or cfg.no_code_centring:
            fused = self.concat_fusion(y_c, y_h, y_w)
        else:
            fused = self.mag(y_c, y_h, y_w)
        y_hat = self.head(fused)

        reps = {m: pool_visits(proj[m], mask, cfg.pooling) for m in feats}
        streams = {"proj": proj, "y": {"C": y_c, "H": y_h, "W": y_w}, "fused": fused, "features": feats}
        return ForwardOutput(y_hat, o_hat, reps, streams)

    def predict(self, batch: Batch) -> np.ndarray:
        """Eval-mode probabilities without touching any tape."""
        was_training = self.training
        self.eval()
        try:
            return self(batch).y_hat.data
        finally:
            self.train(was_training)


def build_model(cfg: ModelConfig, n_codes: int, n_parents: int, vocab: int,
                demo_sizes: Sequence[int] = DEMO_SIZES, seed: int = 0) -> NECHO:
    return NECHO(cfg, n_codes, n_parents, vocab, demo_sizes, seed)


def active_parameter_names(model: NECHO) -> Optional[set]:
    """Names of parameters that the configured forward pass actually uses."""
    cfg = model.cfg
    unused = set()
    for m, key in (("C", "code_encoder"), ("H", "demo_encoder"), ("W", "note_encoder")):
        if m in cfg.dropped():
            unused |= {key, f"hierarchy_heads.{m}", f"projectors.{m}"}
    if cfg.no_transformers:
        unused |= {"cmt", "sa"}
    unused.add("mag" if (cfg.no_mag or cfg.no_code_centring) else "concat_fusion")
    return {name for name, _ in model.named_parameters()
            if not any(name == u or name.startswith(u + ".") for u in unused)}
