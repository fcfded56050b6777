"""Shared bi-GRU encoder, attentional GRU decoder, and visual latent head.

Parameter names carry the task partition used by the multitask objective:
``enc.*`` is the shared encoder, ``dec.*`` belongs to translation only and
``vis.*`` to the visual latent-space task only.

Weights are stored input-major (``x @ W``) except ``vis.W``, which is kept
as (latent, encoder-state) and applied transposed.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, pad_sequences
from .embeddings import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    EmbeddingTable,
    Vocabulary,
    eligible_mask,
    nearest_neighbors,
)
from .errors import ConfigError, FormatError
from .losses import LossConfig, cross_entropy_loss, margin_ranking_loss, multitask_loss, visual_max_margin

OUTPUT_HEADS = ("embedding_prediction", "softmax")
INIT_MODES = ("pretrained", "random")
FEEDBACK_MODES = ("emitted", "predicted")
NEG_INF = -1e30


@dataclass
class ModelConfig:
    src_vocab_size: int = 10000
    tgt_vocab_size: int = 10000
    emb_dim: int = 300
    enc_hidden: int = 256
    dec_hidden: int = 256
    latent_dim: int = 2048
    dropout: float = 0.3
    output_head: str = "embedding_prediction"
    encoder_init: str = "pretrained"
    encoder_trainable: bool = True
    decoder_init: str = "pretrained"
    decoder_fixed: bool = True
    multimodal: bool = True
    feedback: str = "emitted"
    distance: str = "cosine"
    init_range: float = 0.1

    def __post_init__(self):
        for name in ("src_vocab_size", "tgt_vocab_size", "emb_dim", "enc_hidden", "dec_hidden", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        checks = (("output_head", OUTPUT_HEADS), ("encoder_init", INIT_MODES),
                  ("decoder_init", INIT_MODES), ("feedback", FEEDBACK_MODES))
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def enc_out(self) -> int:
        return 2 * self.enc_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _uniform(rng, shape, r):
    return rng.uniform(-r, r, size=shape)


def init_parameters(config: ModelConfig, rng: np.random.Generator,
                    src_table: EmbeddingTable | None = None,
                    tgt_table: EmbeddingTable | None = None) -> dict[str, Tensor]:
    """Uniform(-r, r) weights, zero biases, embedding tables copied in."""
    c, r = config, config.init_range
    E, H, S = c.emb_dim, c.enc_hidden, c.dec_hidden
    arrays: dict[str, np.ndarray] = {}

    def table(tbl, vocab_size):
        if tbl is not None:
            if tbl.vectors.shape != (vocab_size, E):
                raise ConfigError(f"table shape {tbl.vectors.shape} != {(vocab_size, E)}")
            return tbl.vectors.copy()
        out = _uniform(rng, (vocab_size, E), r)
        out[PAD_ID] = 0.0
        return out

    arrays["enc.emb"] = table(src_table, c.src_vocab_size)
    for d in ("fwd", "bwd"):
        arrays[f"enc.{d}.W_i"] = _uniform(rng, (E, 3 * H), r)
        arrays[f"enc.{d}.W_h"] = _uniform(rng, (H, 3 * H), r)
        arrays[f"enc.{d}.b_i"] = np.zeros(3 * H)
        arrays[f"enc.{d}.b_h"] = np.zeros(3 * H)

    arrays["dec.emb"] = table(tgt_table, c.tgt_vocab_size)
    arrays["dec.init.W"] = _uniform(rng, (c.enc_out, S), r)
    arrays["dec.init.b"] = np.zeros(S)
    arrays["dec.att.W_q"] = _uniform(rng, (S, S), r)
    arrays["dec.att.W_k"] = _uniform(rng, (c.enc_out, S), r)
    arrays["dec.att.v"] = _uniform(rng, (S, 1), r)
    arrays["dec.gru.W_i"] = _uniform(rng, (E + c.enc_out, 3 * S), r)
    arrays["dec.gru.W_h"] = _uniform(rng, (S, 3 * S), r)
    arrays["dec.gru.b_i"] = np.zeros(3 * S)
    arrays["dec.gru.b_h"] = np.zeros(3 * S)
    if c.output_head == "embedding_prediction":
        arrays["dec.out.W"] = _uniform(rng, (S, E), r)
        arrays["dec.out.b"] = np.zeros(E)
    else:
        arrays["dec.out.W"] = _uniform(rng, (S + c.enc_out, c.tgt_vocab_size), r)
        arrays["dec.out.b"] = np.zeros(c.tgt_vocab_size)
    if c.multimodal:
        arrays["vis.W"] = _uniform(rng, (c.latent_dim, c.enc_out), r)

    dtype = ad.get_default_dtype()
    params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()}
    params["enc.emb"].requires_grad = c.encoder_trainable
    params["dec.emb"].requires_grad = not c.decoder_fixed
    return params


def gru_cell(x_proj: Tensor, h: Tensor, W_h: Tensor, b_h: Tensor) -> Tensor:
    """GRU update given the precomputed input projection ``x W_i + b_i``.

    r = sig(xr + hr), z = sig(xz + hz), n = tanh(xn + r * hn),
    h' = (1 - z) * n + z * h.
    """
    size = h.shape[-1]
    hp = ad.matmul(h, W_h) + b_h
    xr, xz, xn = x_proj[:, :size], x_proj[:, size: 2 * size], x_proj[:, 2 * size:]
    hr, hz, hn = hp[:, :size], hp[:, size: 2 * size], hp[:, 2 * size:]
    r = ad.sigmoid(xr + hr)
    z = ad.sigmoid(xz + hz)
    n = ad.tanh(xn + r * hn)
    return (1.0 - z) * n + z * h


@dataclass
class DecoderState:
    hidden: Tensor
    keys: Tensor  # H @ W_k, precomputed for attention
    states: Tensor  # H
    mask: np.ndarray


class MultimodalTranslator:
    """Encoder-decoder with an embedding-prediction (or softmax) output head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 src_vocab: Vocabulary, tgt_vocab: Vocabulary):
        self.config = config
        self.params = params
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab

    @classmethod
    def create(cls, config: ModelConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
               rng: np.random.Generator, src_table: EmbeddingTable | None = None,
               tgt_table: EmbeddingTable | None = None) -> "MultimodalTranslator":
        params = init_parameters(config, rng, src_table, tgt_table)
        return cls(config, params, src_vocab, tgt_vocab)

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def _drop(self, x, training, rng):
        return ad.dropout(x, self.config.dropout, training, rng)

    # -- encoder ---------------------------------------------------------

    def encode(self, src: np.ndarray, src_mask: np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Bidirectional GRU states, (B, N, 2 * enc_hidden); pad positions are zero.

        Pad steps carry the previous state through unchanged, so the backward
        direction starts at each sentence's last real token.
        """
        p = self.params
        B, N = src.shape
        H = self.config.enc_hidden
        mask = np.asarray(src_mask, dtype=p["enc.emb"].data.dtype)
        emb = ad.embedding_lookup(p["enc.emb"], src)
        outputs = {}
        for direction, steps in (("fwd", range(N)), ("bwd", range(N - 1, -1, -1))):
            x_proj = ad.matmul(emb, p[f"enc.{direction}.W_i"]) + p[f"enc.{direction}.b_i"]
            h = Tensor(np.zeros((B, H), dtype=mask.dtype))
            seq = [None] * N
            for t in steps:
                m = mask[:, t: t + 1]
                h_new = gru_cell(x_proj[:, t, :], h, p[f"enc.{direction}.W_h"], p[f"enc.{direction}.b_h"])
                h = h_new * m + h * (1.0 - m)
                seq[t] = h * m
            outputs[direction] = ad.stack(seq, axis=1)
        H_all = ad.concat([outputs["fwd"], outputs["bwd"]], axis=-1)
        return self._drop(H_all, training, rng)

    @staticmethod
    def masked_mean(states: Tensor, mask: np.ndarray) -> Tensor:
        """Mean over unmasked positions; ``states`` must be zero where masked."""
        counts = np.asarray(mask).sum(axis=1, keepdims=True)
        return ad.sum_(states, axis=1) / counts

    # -- attention / decoder ---------------------------------------------

    def attend(self, prev_state: Tensor, states: Tensor, mask: np.ndarray,
               keys: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Additive attention; returns (context (B, 2H), weights (B, N))."""
        p = self.params
        if keys is None:
            keys = ad.matmul(states, p["dec.att.W_k"])
        B, N, _ = keys.shape
        q = ad.reshape(ad.matmul(prev_state, p["dec.att.W_q"]), (B, 1, -1))
        scores = ad.reshape(ad.matmul(ad.tanh(keys + q), p["dec.att.v"]), (B, N))
        scores = scores + (1.0 - np.asarray(mask)) * NEG_INF
        weights = ad.softmax(scores, axis=1)
        context = ad.matmul(ad.reshape(weights, (B, 1, N)), states)
        return ad.reshape(context, (B, -1)), weights

    def init_decoder(self, states: Tensor, mask: np.ndarray) -> DecoderState:
        p = self.params
        s0 = ad.tanh(ad.matmul(self.masked_mean(states, mask), p["dec.init.W"]) + p["dec.init.b"])
        return DecoderState(s0, ad.matmul(states, p["dec.att.W_k"]), states, np.asarray(mask))

    def decode_step(self, prev_emb: Tensor, state: DecoderState, training: bool = False,
                    rng: np.random.Generator | None = None):
        """One decoder step.

        Returns (new_state, output, context) where output is the predicted
        embedding tanh(W_o s + b_o) for the embedding head, or the vocabulary
        distribution for the softmax head.
        """
        p = self.params
        context, _ = self.attend(state.hidden, state.states, state.mask, state.keys)
        x_proj = ad.matmul(ad.concat([prev_emb, context], axis=-1), p["dec.gru.W_i"]) + p["dec.gru.b_i"]
        s = gru_cell(x_proj, state.hidden, p["dec.gru.W_h"], p["dec.gru.b_h"])
        new_state = DecoderState(s, state.keys, state.states, state.mask)
        s_out = self._drop(s, training, rng)
        if self.config.output_head == "embedding_prediction":
            out = self.predict_embedding(s_out)
        else:
            out = self.softmax_head_step(s_out, context)
        return new_state, out, context

    def predict_embedding(self, s: Tensor) -> Tensor:
        p = self.params
        return ad.tanh(ad.matmul(s, p["dec.out.W"]) + p["dec.out.b"])

    def softmax_head_step(self, s: Tensor, context: Tensor) -> Tensor:
        p = self.params
        logits = ad.matmul(ad.concat([s, context], axis=-1), p["dec.out.W"]) + p["dec.out.b"]
        return ad.softmax(logits, axis=-1)

    # -- visual head -----------------------------------------------------

    def project_visual(self, states: Tensor, mask: np.ndarray) -> Tensor:
        """tanh(W_v . mean of unmasked encoder states), (B, latent_dim)."""
        pooled = self.masked_mean(states, mask)
        return ad.tanh(ad.matmul(pooled, ad.transpose(self.params["vis.W"])))

    # -- training forward ------------------------------------------------

    def decoder_outputs(self, batch: Batch, states: Tensor, training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced outputs for every target step, (B, M-1, D or V)."""
        p = self.params
        state = self.init_decoder(states, batch.src_mask)
        inputs = ad.embedding_lookup(p["dec.emb"], batch.tgt[:, :-1])
        outs = []
        for j in range(batch.tgt.shape[1] - 1):
            state, out, _ = self.decode_step(inputs[:, j, :], state, training, rng)
            outs.append(out)
        return ad.stack(outs, axis=1)

    def translation_loss(self, batch: Batch, states: Tensor, loss_config: LossConfig,
                         training: bool = False, rng=None) -> Tensor:
        outs = self.decoder_outputs(batch, states, training, rng)
        gold, mask = batch.tgt[:, 1:], batch.tgt_mask[:, 1:]
        if self.config.output_head == "embedding_prediction":
            return margin_ranking_loss(outs, gold, mask, self.params["dec.emb"],
                                       loss_config.gamma, loss_config.negative_mode)
        return cross_entropy_loss(outs, gold, mask)

    def visual_loss(self, batch: Batch, states: Tensor, loss_config: LossConfig) -> Tensor:
        v_hat = self.project_visual(states, batch.src_mask)
        loss = visual_max_margin(v_hat, batch.features, loss_config.alpha)
        if loss_config.visual_reduction == "mean":
            loss = loss / float(batch.size)
        return loss

    def losses(self, batch: Batch, loss_config: LossConfig, training: bool = False,
               rng=None, alternate: str | None = None):
        """(J, J_T, J_V); J_V is None when the batch has no images or the
        model is text-only.  ``alternate`` restricts the pass to one task."""
        states = self.encode(batch.src, batch.src_mask, training, rng)
        with_images = self.config.multimodal and batch.features is not None
        loss_t = None if alternate == "visual" else self.translation_loss(batch, states, loss_config, training, rng)
        loss_v = self.visual_loss(batch, states, loss_config) if with_images and alternate != "text" else None
        if loss_t is None:
            return loss_v, None, loss_v
        return multitask_loss(loss_t, loss_v, loss_config.lam), loss_t, loss_v

    # -- inference -------------------------------------------------------

    def translate_ids(self, sources: Sequence[Sequence[int]], max_len: int = 100) -> list[list[int]]:
        """Greedy decoding for a list of id sequences (no bos/eos in output)."""
        if max_len <= 0 or not sources:
            return [[] for _ in sources]
        p = self.params
        order = [i for i, s in enumerate(sources) if len(s)]
        results: list[list[int]] = [[] for _ in sources]
        if not order:
            return results
        src, mask = pad_sequences([sources[i] for i in order])
        table = p["dec.emb"].data
        eligible = eligible_mask(len(table))
        with ad.no_grad():
            states = self.encode(src, mask)
            state = self.init_decoder(states, mask)
            prev = Tensor(table[np.full(len(order), BOS_ID)])
            done = np.zeros(len(order), dtype=bool)
            emitted = [[] for _ in order]
            for _ in range(max_len):
                state, out, _ = self.decode_step(prev, state)
                if self.config.output_head == "embedding_prediction":
                    ids, _ = nearest_neighbors(out.data, table, True, self.config.distance)
                else:
                    probs = np.where(eligible, out.data, -np.inf)
                    ids = np.argmax(probs, axis=1)
                for k, w in enumerate(ids):
                    if done[k]:
                        continue
                    if w == EOS_ID:
                        done[k] = True
                    else:
                        emitted[k].append(int(w))
                if done.all():
                    break
                if self.config.output_head == "embedding_prediction" and self.config.feedback == "predicted":
                    prev = out
                else:
                    prev = Tensor(table[ids])
        for k, i in enumerate(order):
            results[i] = emitted[k]
        return results

    def translate(self, tokens: Sequence[str], max_len: int = 100) -> list[str]:
        ids = self.translate_ids([self.src_vocab.encode(tokens)], max_len)[0]
        return self.tgt_vocab.decode(ids)

    def translate_batch(self, sentences: Sequence[Sequence[str]], max_len: int = 100,
                        chunk: int = 64) -> list[list[str]]:
        out = []
        for i in range(0, len(sentences), chunk):
            part = [self.src_vocab.encode(s) for s in sentences[i: i + chunk]]
            out.extend(self.tgt_vocab.decode(ids) for ids in self.translate_ids(part, max_len))
        return out

    # -- checkpoints -----------------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def _read_blob(fh) -> bytes:
    head = fh.read(8)
    if len(head) != 8:
        raise FormatError("checkpoint truncated")
    (n,) = struct.unpack("<Q", head)
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("checkpoint truncated")
    return data


def save_checkpoint(model: MultimodalTranslator, path, extra: dict | None = None) -> None:
    """Binary container: magic, version, key-sorted JSON config, vocabularies,
    then (name, shape, float64 little-endian data) per parameter."""
    config = {"model": model.config.to_dict(), "extra": extra or {}}
    vocabs = {"source": model.src_vocab.to_dict(), "target": model.tgt_vocab.to_dict()}
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_blob(buf, canonical_json(config).encode("utf-8"))
    _write_blob(buf, canonical_json(vocabs).encode("utf-8"))
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        t = model.params[name]
        _write_blob(buf, name.encode("utf-8"))
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(struct.pack("<?", t.requires_grad))
        _write_blob(buf, np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[MultimodalTranslator, dict]:
    """Inverse of :func:`save_checkpoint`; returns (model, extra config)."""
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(_read_blob(fh))
    vocabs = json.loads(_read_blob(fh))
    (count,) = struct.unpack("<I", fh.read(4))
    params = {}
    for _ in range(count):
        name = _read_blob(fh).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        (req,) = struct.unpack("<?", fh.read(1))
        arr = np.frombuffer(_read_blob(fh), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(arr, requires_grad=req, dtype=np.float64)
    model = MultimodalTranslator(
        ModelConfig.from_dict(config["model"]), params,
        Vocabulary.from_dict(vocabs["source"]), Vocabulary.from_dict(vocabs["target"]),
    )
    return model, config.get("extra", {})


def parameter_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
