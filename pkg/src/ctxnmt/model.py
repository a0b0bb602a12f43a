"""Encoder-decoder translation model with optional context conditioning.

Three context modes share one decoder:

* ``none``: a standard transformer encoder over the source sentence.
* ``gated-context``: the context sentence runs through the encoder layers
  shared with the source path (all but the last) plus its own final layer;
  the source encoder's last layer attends over that output and blends it
  with its self-attention result through a learned sigmoid gate.
* ``concat``: context and source are concatenated into one sequence with a
  learned two-way segment embedding marking which side each token came from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .vocab import BOS, PAD, TBOS, TEOS

CONTEXT_MODES = ("none", "gated-context", "concat")
CHECKPOINT_MAGIC = b"CTXNMTCK"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    src_vocab: int
    tgt_vocab: int
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 256
    context_mode: str = "none"
    beam_width: int = 4
    length_penalty: float = 0.6

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("dropout", "label_smoothing"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ModelError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.context_mode not in CONTEXT_MODES:
            raise ModelError(f"context_mode must be one of {CONTEXT_MODES}, got {self.context_mode!r}")
        if self.beam_width < 1:
            raise ModelError(f"beam_width must be >= 1, got {self.beam_width}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


@dataclass
class EncoderState:
    """Final encoder hidden states plus what the decoder needs to attend."""
    hidden: ad.Tensor
    mask: np.ndarray
    is_pad: np.ndarray
    self_attn: list = field(default_factory=list)


@dataclass
class ContextualEncoderOutput(EncoderState):
    """Encoder state extended with the gate diagnostics of the fusion layer.

    ``fused`` holds the raw gated-sum values (before the following norm), so
    every coordinate lies between its self-attention and context-attention
    inputs. ``ctx_attention`` is head-averaged, shape (B, S, C).
    """
    gates: np.ndarray | None = None
    ctx_attention: np.ndarray | None = None
    fused: np.ndarray | None = None


@dataclass
class TranslationResult:
    ids: list[int]
    score: float
    truncated: bool


def _no_drop(t: ad.Tensor) -> ad.Tensor:
    return t


class Transformer:
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        store = ly.ParamStore(rng, dtype)
        self.store = store
        c = config

        if c.context_mode == "gated-context" and c.src_vocab <= BOS:
            raise ModelError(
                f"source vocabulary of size {c.src_vocab} has no room for the "
                f"context role token (id {BOS})")

        self.src_embed = store.normal("src_embed", (c.src_vocab, c.d_model), c.d_model ** -0.5)
        self.tgt_embed = store.normal("tgt_embed", (c.tgt_vocab, c.d_model), c.d_model ** -0.5)
        self._pe = ly.positional_encoding(c.max_len, c.d_model, dtype=dtype)

        n_shared = c.n_layers - 1 if c.context_mode == "gated-context" else c.n_layers
        self.enc_layers = [ly.EncoderLayer(store, f"enc.{i}", c.d_model, c.n_heads, c.d_ff)
                           for i in range(n_shared)]
        if c.context_mode == "gated-context":
            self.fusion_layer = ly.ContextFusionLayer(store, "enc.fuse", c.d_model,
                                                      c.n_heads, c.d_ff)
            self.ctx_final = ly.EncoderLayer(store, "ctx.final", c.d_model, c.n_heads, c.d_ff)
        if c.context_mode == "concat":
            self.seg_embed = store.normal("seg_embed", (2, c.d_model), c.d_model ** -0.5)

        self.dec_layers = [ly.DecoderLayer(store, f"dec.{i}", c.d_model, c.n_heads, c.d_ff)
                           for i in range(c.n_layers)]
        # modest classifier init: initial logit variance ~0.25 keeps fresh
        # predictions near uniform without flattening upstream gradients
        self.out_proj = ly.Linear(store, "out_proj", c.d_model, c.tgt_vocab,
                                  init_std=0.5 / np.sqrt(c.d_model))

    # -- embedding ---------------------------------------------------------

    def _drop_fn(self, train: bool, rng: np.random.Generator | None):
        if not train or self.config.dropout == 0.0:
            return _no_drop
        if rng is None:
            raise ModelError("training forward pass needs a dropout rng")
        rate = self.config.dropout
        return lambda t: ad.dropout(t, rate, rng, train=True)

    def _embed(self, table: ad.Tensor, ids: np.ndarray, flags: np.ndarray | None = None) -> ad.Tensor:
        length = ids.shape[1]
        if length > self.config.max_len:
            raise ModelError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        x = ad.scale(ad.embedding(table, ids), float(np.sqrt(self.config.d_model)))
        if flags is not None:
            x = ad.add(x, ad.embedding(self.seg_embed, flags))
        return ad.add(x, self._pe[None, :length, :])

    # -- encoding ----------------------------------------------------------

    def encode(self, src_ids: np.ndarray, ctx_ids: np.ndarray | None = None,
               train: bool = False, rng: np.random.Generator | None = None,
               zero_context: bool = False) -> EncoderState:
        src_ids = np.asarray(src_ids)
        if src_ids.ndim != 2 or src_ids.shape[1] == 0:
            raise ModelError(f"source batch must be 2-d and nonempty, got shape {src_ids.shape}")
        drop = self._drop_fn(train, rng)
        mode = self.config.context_mode

        if mode == "concat":
            if ctx_ids is None:
                raise ModelError("concat mode needs context ids")
            merged, flags = self._repack_concat(np.asarray(ctx_ids), src_ids)
            return self._encode_plain(merged, drop, flags=flags)
        if mode == "gated-context":
            if ctx_ids is None:
                raise ModelError("gated-context mode needs context ids")
            return self._encode_gated(src_ids, self._normalize_context(np.asarray(ctx_ids)),
                                      drop, zero_context)
        return self._encode_plain(src_ids, drop)

    def _encode_plain(self, ids: np.ndarray, drop, flags: np.ndarray | None = None) -> EncoderState:
        is_pad = ids == PAD
        mask = ly.padding_mask(is_pad, self.dtype)
        x = self._embed(self.src_embed, ids, flags=flags)
        x = drop(x)
        weights = []
        for layer in self.enc_layers:
            x, w = layer(x, mask, drop)
            weights.append(w)
        return EncoderState(hidden=x, mask=mask, is_pad=is_pad, self_attn=weights)

    def _normalize_context(self, ctx_ids: np.ndarray) -> np.ndarray:
        """Ensure every context row carries the leading role token."""
        if ctx_ids.ndim != 2 or ctx_ids.shape[1] == 0:
            raise ModelError(f"context batch must be 2-d and nonempty, got shape {ctx_ids.shape}")
        has_role = ctx_ids[:, 0] == BOS
        if has_role.all():
            return ctx_ids
        if has_role.any():
            raise ModelError("context batch mixes rows with and without the leading role token")
        lead = np.full((ctx_ids.shape[0], 1), BOS, dtype=ctx_ids.dtype)
        return np.concatenate([lead, ctx_ids], axis=1)

    def _encode_gated(self, src_ids: np.ndarray, ctx_ids: np.ndarray, drop,
                      zero_context: bool) -> ContextualEncoderOutput:
        src_pad = src_ids == PAD
        ctx_pad = ctx_ids == PAD
        src_mask = ly.padding_mask(src_pad, self.dtype)
        ctx_mask = ly.padding_mask(ctx_pad, self.dtype)

        x = drop(self._embed(self.src_embed, src_ids))
        weights = []
        for layer in self.enc_layers:
            x, w = layer(x, src_mask, drop)
            weights.append(w)

        ctx_hidden = None
        if not zero_context:
            h = drop(self._embed(self.src_embed, ctx_ids))
            for layer in self.enc_layers:
                h, _ = layer(h, ctx_mask, drop)
            ctx_hidden, _ = self.ctx_final(h, ctx_mask, drop)

        fo = self.fusion_layer(x, ctx_hidden, src_mask, ctx_mask, drop,
                               zero_context=zero_context)
        weights.append(fo.self_weights)
        return ContextualEncoderOutput(
            hidden=fo.out, mask=src_mask, is_pad=src_pad, self_attn=weights,
            gates=fo.gate.data.copy(), ctx_attention=fo.ctx_weights,
            fused=fo.fused.data.copy())

    def _repack_concat(self, ctx_ids: np.ndarray, src_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Join [context ; source] per row, dropping pads and the role token."""
        rows, flag_rows = [], []
        for ctx_row, src_row in zip(ctx_ids, src_ids):
            c = ctx_row[ctx_row != PAD]
            if c.size and c[0] == BOS:
                c = c[1:]
            s = src_row[src_row != PAD]
            if c.size + s.size > self.config.max_len:
                raise ModelError(
                    f"concatenation of context ({c.size}) and source ({s.size}) "
                    f"exceeds max_len {self.config.max_len}")
            rows.append(np.concatenate([c, s]))
            flag_rows.append(np.concatenate([np.zeros(c.size, dtype=np.int64),
                                             np.ones(s.size, dtype=np.int64)]))
        width = max(r.size for r in rows)
        merged = np.full((len(rows), width), PAD, dtype=np.int64)
        flags = np.zeros((len(rows), width), dtype=np.int64)
        for i, (r, f) in enumerate(zip(rows, flag_rows)):
            merged[i, :r.size] = r
            flags[i, :f.size] = f
        return merged, flags

    # -- decoding ----------------------------------------------------------

    def _decode_logits(self, enc: EncoderState, tgt_in: np.ndarray, drop) -> ad.Tensor:
        length = tgt_in.shape[1]
        self_mask = ly.causal_mask(length, self.dtype) + ly.padding_mask(tgt_in == PAD, self.dtype)
        y = drop(self._embed(self.tgt_embed, tgt_in))
        for layer in self.dec_layers:
            y, _ = layer(y, enc.hidden, self_mask, enc.mask, drop)
        return self.out_proj(y)

    def loss(self, src_ids: np.ndarray, tgt_ids: np.ndarray,
             ctx_ids: np.ndarray | None = None, train: bool = False,
             rng: np.random.Generator | None = None) -> ad.Tensor:
        """Label-smoothed mean per-token cross entropy, teacher forced."""
        tgt_ids = np.asarray(tgt_ids)
        enc = self.encode(src_ids, ctx_ids, train=train, rng=rng)
        drop = self._drop_fn(train, rng)
        logits = self._decode_logits(enc, tgt_ids[:, :-1], drop)
        tgt_out = tgt_ids[:, 1:]
        return ad.cross_entropy(logits, tgt_out, token_mask=(tgt_out != PAD),
                                label_smoothing=self.config.label_smoothing)

    def decode_step(self, prefix: np.ndarray, enc: EncoderState) -> np.ndarray:
        """Next-token probabilities (B, tgt_vocab) for each prefix row."""
        prefix = np.asarray(prefix)
        if prefix.ndim != 2 or prefix.shape[1] == 0:
            raise ModelError(f"prefix must be 2-d and nonempty, got shape {prefix.shape}")
        if (prefix[:, 0] != TBOS).any():
            raise ModelError("prefix must start with the target begin token")
        if prefix.shape[1] > self.config.max_len:
            raise ModelError(f"prefix length {prefix.shape[1]} exceeds max_len {self.config.max_len}")
        logits = self._decode_logits(enc, prefix, _no_drop)
        return ad.softmax(ad.Tensor(logits.data[:, -1, :])).data

    def _length_norm(self, n_tokens: int) -> float:
        return ((5.0 + n_tokens) / 6.0) ** self.config.length_penalty

    def _greedy(self, enc: EncoderState, max_out: int) -> list[TranslationResult]:
        batch = enc.hidden.shape[0]
        prefix = np.full((batch, 1), TBOS, dtype=np.int64)
        logprob = np.zeros(batch)
        done = np.zeros(batch, dtype=bool)
        for _ in range(max_out):
            probs = self.decode_step(prefix, enc)
            nxt = probs.argmax(axis=-1)
            logprob += np.where(done, 0.0, np.log(probs[np.arange(batch), nxt] + 1e-30))
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == TEOS
            if done.all():
                break
        results = []
        for i in range(batch):
            ids = prefix[i, 1:].tolist()
            if TEOS in ids:
                ids = ids[:ids.index(TEOS) + 1]
                truncated = False
            else:
                truncated = True
            results.append(TranslationResult(
                ids=ids, score=logprob[i] / self._length_norm(max(len(ids), 1)),
                truncated=truncated))
        return results

    def _beam_single(self, enc_row: EncoderState, width: int, max_out: int) -> TranslationResult:
        live: list[tuple[list[int], float]] = [([], 0.0)]
        finished: list[TranslationResult] = []
        for _ in range(max_out):
            prefix = np.array([[TBOS] + ids for ids, _ in live], dtype=np.int64)
            hidden = ad.Tensor(np.repeat(enc_row.hidden.data, len(live), axis=0))
            mask = np.repeat(enc_row.mask, len(live), axis=0)
            probs = self.decode_step(prefix, EncoderState(hidden, mask, enc_row.is_pad))
            logp = np.log(probs + 1e-30)
            candidates = []
            for (ids, lp), row in zip(live, logp):
                for tok in np.argsort(row)[::-1][:width]:
                    candidates.append((ids + [int(tok)], lp + row[tok]))
            candidates.sort(key=lambda c: c[1], reverse=True)
            live = []
            for ids, lp in candidates[:width]:
                if ids[-1] == TEOS:
                    finished.append(TranslationResult(
                        ids=ids, score=lp / self._length_norm(len(ids)), truncated=False))
                else:
                    live.append((ids, lp))
            if not live or len(finished) >= width:
                break
        for ids, lp in live:
            finished.append(TranslationResult(
                ids=ids, score=lp / self._length_norm(max(len(ids), 1)), truncated=True))
        return max(finished, key=lambda r: r.score)

    def translate(self, src_ids: np.ndarray, ctx_ids: np.ndarray | None = None,
                  mode: str = "greedy", width: int | None = None,
                  max_out: int | None = None) -> list[TranslationResult]:
        """Decode a batch; greedy is beam(1). Beam keeps the better of its own
        best finalist and the greedy hypothesis, scored by length-normalized
        log-probability."""
        if mode not in ("greedy", "beam"):
            raise ModelError(f"unknown decode mode {mode!r}")
        width = self.config.beam_width if width is None else width
        if width < 1:
            raise ModelError(f"beam width must be >= 1, got {width}")
        max_out = (self.config.max_len - 1) if max_out is None else max_out
        enc = self.encode(src_ids, ctx_ids, train=False)
        greedy = self._greedy(enc, max_out)
        if mode == "greedy" or width == 1:
            return greedy
        results = []
        for i, g in enumerate(greedy):
            row = EncoderState(hidden=ad.Tensor(enc.hidden.data[i:i + 1]),
                               mask=enc.mask[i:i + 1], is_pad=enc.is_pad[i:i + 1])
            b = self._beam_single(row, width, max_out)
            results.append(b if b.score >= g.score else g)
        return results


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Transformer, path: str) -> None:
    """Binary container: magic, JSON header, raw little-endian payload."""
    entries = []
    chunks = []
    offset = 0
    for name, tensor in model.store.items():
        raw = np.ascontiguousarray(tensor.data).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape),
                        "dtype": tensor.data.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": model.dtype.str,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str) -> Transformer:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupted")

    config = ModelConfig.from_dict(header["config"])
    model = Transformer(config, np.random.default_rng(0), dtype=np.dtype(header["dtype"]))
    stored = {e["name"]: e for e in header["tensors"]}
    have = {name for name, _ in model.store.items()}
    if set(stored) != have:
        missing = sorted(have - set(stored))
        extra = sorted(set(stored) - have)
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, extra {extra})")
    for name, tensor in model.store.items():
        e = stored[name]
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        data = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        if tuple(data.shape) != tensor.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        tensor.data = data.copy()
    return model
