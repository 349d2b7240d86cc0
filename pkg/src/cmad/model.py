"""Frozen base decoder, condition encoder over its top-L blocks, gated injection.

The toy base is a pre-norm causal decoder whose attention heads use factored
projections: head h reads its own d_head-wide slice of the residual stream
through square d_head x d_head query/key/value maps and writes back through a
d_head x d_model output map. That makes the per-head condition embedding (61
-> d_head, see representation.fuse) addable to the head input before the
frozen projections, which is exactly how the encoder consumes it.

The encoder reuses the top-L self-attention blocks of the decoder (weights
shared, still frozen), runs them without any attention mask, and hands each
adapted decoder layer its per-head query/key/value stacks. The decoder adds,
per adapted layer, gate * (softmax((Q' + Q) K^T / sqrt(d_head)) V) W_o on top
of its own causal attention output; all gates start at exactly 0.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nm
from . import representation as rep
from .errors import AlignmentError, CapacityError, ConfigError
from .numerics import Parameter, Tensor
from .representation import ConditionParams, ConditionSequence

NEG_INF = -1e9


def _init_std(fan_in: int) -> float:
    # fan-in scaling keeps activations and attention scores at unit order,
    # which a frozen random base needs for its softmaxes to have any contrast
    return 1.0 / math.sqrt(fan_in)


@dataclass
class BaseConfig:
    """Architecture of the base decoder (and of its full-scale analog)."""
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    t_max: int = 128
    ffn_multiplier: int = 4
    use_cross_attention: bool = True
    prompt_vocab: int = 4

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "t_max",
                     "ffn_multiplier", "prompt_vocab"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


class AttentionWeights:
    """Per-head projections of one attention block (plus its pre-norm)."""

    def __init__(self, prefix: str, cfg: BaseConfig, rng, dtype, trainable: bool):
        dh = cfg.d_head

        def p(name, shape, init="normal"):
            data = (rng.normal(0.0, _init_std(shape[0]), size=shape) if init == "normal"
                    else np.ones(shape) if init == "ones" else np.zeros(shape))
            return Parameter(data.astype(dtype), name=name, trainable=trainable)

        self.ln_gamma = p(f"{prefix}.ln.gamma", (cfg.d_model,), "ones")
        self.ln_beta = p(f"{prefix}.ln.beta", (cfg.d_model,), "zeros")
        self.wq = [p(f"{prefix}.h{h}.wq", (dh, dh)) for h in range(cfg.n_heads)]
        self.wk = [p(f"{prefix}.h{h}.wk", (dh, dh)) for h in range(cfg.n_heads)]
        self.wv = [p(f"{prefix}.h{h}.wv", (dh, dh)) for h in range(cfg.n_heads)]
        self.wo = [p(f"{prefix}.h{h}.wo", (dh, cfg.d_model)) for h in range(cfg.n_heads)]

    def parameters(self) -> list[Parameter]:
        return [self.ln_gamma, self.ln_beta, *self.wq, *self.wk, *self.wv, *self.wo]


class FeedForward:
    def __init__(self, prefix: str, cfg: BaseConfig, rng, dtype, trainable: bool):
        hidden = cfg.ffn_multiplier * cfg.d_model

        def p(name, shape, init="normal"):
            data = (rng.normal(0.0, _init_std(shape[0]), size=shape) if init == "normal"
                    else np.ones(shape) if init == "ones" else np.zeros(shape))
            return Parameter(data.astype(dtype), name=name, trainable=trainable)

        self.ln_gamma = p(f"{prefix}.ln.gamma", (cfg.d_model,), "ones")
        self.ln_beta = p(f"{prefix}.ln.beta", (cfg.d_model,), "zeros")
        self.w1 = p(f"{prefix}.w1", (cfg.d_model, hidden))
        self.w2 = p(f"{prefix}.w2", (hidden, cfg.d_model))

    def parameters(self) -> list[Parameter]:
        return [self.ln_gamma, self.ln_beta, self.w1, self.w2]


class DecoderBlock:
    def __init__(self, index: int, cfg: BaseConfig, rng, dtype, trainable: bool):
        prefix = f"base.block{index}"
        self.attn = AttentionWeights(f"{prefix}.attn", cfg, rng, dtype, trainable)
        self.cross = (AttentionWeights(f"{prefix}.cross", cfg, rng, dtype, trainable)
                      if cfg.use_cross_attention else None)
        self.ffn = FeedForward(f"{prefix}.ffn", cfg, rng, dtype, trainable)

    def parameters(self) -> list[Parameter]:
        out = self.attn.parameters()
        if self.cross is not None:
            out += self.cross.parameters()
        return out + self.ffn.parameters()


class FrozenBaseDecoder:
    """The stand-in for the pretrained decoder. Normally every parameter is frozen."""

    def __init__(self, config: BaseConfig, seed: int = 0, dtype=np.float32,
                 trainable: bool = False):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        def p(name, shape, std):
            return Parameter(rng.normal(0.0, std, size=shape).astype(dtype),
                             name=name, trainable=trainable)

        self.token_emb = p("base.token_emb", (config.vocab_size, config.d_model), 1.0)
        self.pos_emb = p("base.pos_emb", (config.t_max, config.d_model), 1.0)
        self.prompt_emb = (p("base.prompt_emb", (config.prompt_vocab, config.d_model), 1.0)
                           if config.use_cross_attention else None)
        self.blocks = [DecoderBlock(i, config, rng, dtype, trainable)
                       for i in range(config.n_layers)]
        self.final_gamma = Parameter(np.ones(config.d_model, dtype=dtype),
                                     name="base.final_ln.gamma", trainable=trainable)
        self.final_beta = Parameter(np.zeros(config.d_model, dtype=dtype),
                                    name="base.final_ln.beta", trainable=trainable)
        self.head_w = p("base.head.w", (config.d_model, config.vocab_size),
                        _init_std(config.d_model))

    def parameters(self) -> list[Parameter]:
        out = [self.token_emb, self.pos_emb]
        if self.prompt_emb is not None:
            out.append(self.prompt_emb)
        for block in self.blocks:
            out += block.parameters()
        return out + [self.final_gamma, self.final_beta, self.head_w]

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False
            p.requires_grad = False
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag
            p.requires_grad = flag


def build_base(config: BaseConfig, seed: int, dtype=np.float32,
               checkpoint_path: str | Path | None = None) -> FrozenBaseDecoder:
    """Deterministically initialized (or checkpoint-loaded) base with all parameters frozen."""
    base = FrozenBaseDecoder(config, seed=seed, dtype=dtype, trainable=False)
    if checkpoint_path is not None:
        tensors = ckpt.load_tensors(checkpoint_path)
        params = {p.name: p for p in base.parameters()}
        ckpt.validate_against(tensors, {n: p.shape for n, p in params.items()})
        for name, p in params.items():
            p.data = tensors[name].astype(dtype)
    return base


class ConditionalEncoder:
    """Unmasked encoder over the decoder's top-L self-attention blocks.

    Owns only its learnable input sequence; the blocks are shared references
    (or frozen copies when copy_weights is set, mirroring an accounting where
    duplicated layers count as new parameters).
    """

    def __init__(self, base: FrozenBaseDecoder, l_layers: int, rng,
                 dtype=np.float32, copy_weights: bool = False):
        cfg = base.config
        if l_layers > cfg.n_layers:
            raise ConfigError(f"L={l_layers} exceeds n_layers={cfg.n_layers}")
        self.l_layers = l_layers
        self.first_adapted = cfg.n_layers - l_layers
        self.x1 = Parameter(rng.normal(0.0, 1.0, size=(cfg.t_max, cfg.d_model)).astype(dtype),
                            name="enc.x1", trainable=True)
        shared = [base.blocks[self.first_adapted + j].attn for j in range(l_layers)]
        if copy_weights:
            self.blocks = []
            for j, attn in enumerate(shared):
                dup = copy.copy(attn)
                dup.ln_gamma = _frozen_copy(attn.ln_gamma, f"enc.copy{j}.ln.gamma")
                dup.ln_beta = _frozen_copy(attn.ln_beta, f"enc.copy{j}.ln.beta")
                dup.wq = [_frozen_copy(w, f"enc.copy{j}.h{h}.wq") for h, w in enumerate(attn.wq)]
                dup.wk = [_frozen_copy(w, f"enc.copy{j}.h{h}.wk") for h, w in enumerate(attn.wk)]
                dup.wv = [_frozen_copy(w, f"enc.copy{j}.h{h}.wv") for h, w in enumerate(attn.wv)]
                dup.wo = [_frozen_copy(w, f"enc.copy{j}.h{h}.wo") for h, w in enumerate(attn.wo)]
                self.blocks.append(dup)
        else:
            self.blocks = shared
        self.owns_blocks = copy_weights

    def parameters(self) -> list[Parameter]:
        out = [self.x1]
        if self.owns_blocks:
            for block in self.blocks:
                out += block.parameters()
        return out


def _frozen_copy(p: Parameter, name: str) -> Parameter:
    return Parameter(p.data.copy(), name=name, trainable=False)


class AdaptorState:
    """Per-layer gates (initialized to 0) plus the condition embedding parameters."""

    def __init__(self, cond: ConditionParams, gate_layers: list[int], dtype=np.float32):
        self.cond = cond
        self.gates = [Parameter(np.zeros(1, dtype=dtype), name=f"adaptor.gate.l{layer}")
                      for layer in gate_layers]

    def parameters(self) -> list[Parameter]:
        return self.cond.parameters() + self.gates


class AdaptedModel:
    """Frozen base + conditional encoder + gated adaptor over the top-L layers."""

    def __init__(self, base: FrozenBaseDecoder, l_layers: int, seed: int = 0,
                 dtype=np.float32, copy_weights: bool = False):
        cfg = base.config
        if l_layers > cfg.n_layers:
            raise ConfigError(f"L={l_layers} exceeds n_layers={cfg.n_layers}")
        if l_layers < 0:
            raise ConfigError("L must be >= 0")
        self.base = base
        self.config = cfg
        self.l_layers = l_layers
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        if l_layers > 0:
            self.encoder = ConditionalEncoder(base, l_layers, rng, dtype=dtype,
                                              copy_weights=copy_weights)
            cond = ConditionParams.create(rng, l_layers, cfg.n_heads, cfg.d_head,
                                          cfg.t_max, cfg.d_model, dtype=dtype)
            adapted = list(range(cfg.n_layers - l_layers, cfg.n_layers))
            self.adaptor = AdaptorState(cond, adapted, dtype=dtype)
        else:
            self.encoder = None
            self.adaptor = None

    @property
    def first_adapted(self) -> int:
        return self.config.n_layers - self.l_layers

    def gate_values(self) -> dict[int, float]:
        if self.adaptor is None:
            return {}
        return {self.first_adapted + j: float(g.data[0])
                for j, g in enumerate(self.adaptor.gates)}

    def parameters(self) -> list[Parameter]:
        out = list(self.base.parameters())
        if self.encoder is not None:
            out += self.encoder.parameters()
        if self.adaptor is not None:
            out += self.adaptor.parameters()
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        ckpt.validate_against(tensors, {n: p.shape for n, p in params.items()})
        for name, p in params.items():
            p.data = tensors[name].astype(p.dtype)

    def save(self, path: str | Path) -> None:
        ckpt.save_tensors(path, self.state_arrays())

    def load(self, path: str | Path) -> None:
        self.load_state(ckpt.load_tensors(path))


def build_adapted(config: BaseConfig, l_layers: int, seed: int, dtype=np.float32,
                  base: FrozenBaseDecoder | None = None,
                  copy_weights: bool = False) -> AdaptedModel:
    if base is None:
        base = build_base(config, seed=seed, dtype=dtype)
    return AdaptedModel(base, l_layers, seed=seed + 1, dtype=dtype, copy_weights=copy_weights)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)
    return _MASK_CACHE[key]


@dataclass
class EncoderActivations:
    """Per adapted layer: per-head (Q, K, V) for injection, plus the layer outputs."""
    qkv: list[list[tuple[Tensor, Tensor, Tensor]]] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)


def encoder_forward(model: AdaptedModel, seq: ConditionSequence) -> EncoderActivations:
    """Run the unmasked condition encoder; Q/K/V of layer j feed decoder layer N-L+j."""
    enc, cfg = model.encoder, model.config
    if enc is None:
        return EncoderActivations()
    n = seq.n_frames
    if n > cfg.t_max:
        raise CapacityError(f"condition length {n} exceeds t_max {cfg.t_max}")
    dh = cfg.d_head
    inv_sqrt = 1.0 / math.sqrt(dh)
    joint = rep.embed_condition(seq, model.adaptor.cond, model.base.token_emb)
    x = nm.slice_rows(enc.x1, 0, n)
    acts = EncoderActivations()
    for j, attn in enumerate(enc.blocks):
        zs = rep.fuse_all(joint, model.adaptor.cond, j)
        head_qkv = []
        out = None
        for h in range(cfg.n_heads):
            u = nm.add(nm.slice_cols(x, h * dh, (h + 1) * dh), zs[h])
            q = nm.matmul(u, attn.wq[h])
            k = nm.matmul(u, attn.wk[h])
            v = nm.matmul(u, attn.wv[h])
            head_qkv.append((q, k, v))
            s = nm.softmax_rows(nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt))
            proj = nm.matmul(nm.matmul(s, v), attn.wo[h])
            out = proj if out is None else nm.add(out, proj)
        acts.qkv.append(head_qkv)
        acts.outputs.append(out)
        x = out
    return acts


def adapted_attention(dec_q_heads: list[Tensor],
                      enc_qkv: list[tuple[Tensor, Tensor, Tensor]],
                      wo_heads: list[Parameter],
                      o_prime: Tensor,
                      gate: Parameter,
                      d_head: int) -> Tensor:
    """O''' = O' + g * sum_h softmax((Q'_h + Q_h) K_h^T / sqrt(d_head)) V_h W_o_h.

    The decoder may hold fewer rows than the condition during incremental
    decoding; encoder queries are then truncated to the decoder prefix while
    keys/values still span every condition frame.
    """
    n_rows = o_prime.shape[0]
    inv_sqrt = 1.0 / math.sqrt(d_head)
    injected = None
    for h, (q_dec, (q_enc, k_enc, v_enc)) in enumerate(zip(dec_q_heads, enc_qkv)):
        if n_rows > q_enc.shape[0]:
            raise AlignmentError(
                f"decoder rows {n_rows} exceed condition frames {q_enc.shape[0]}")
        q = nm.add(q_dec, nm.slice_rows(q_enc, 0, n_rows))
        scores = nm.scale(nm.matmul(q, nm.transpose(k_enc)), inv_sqrt)
        s = nm.softmax_rows(scores)  # unmasked over condition positions
        proj = nm.matmul(nm.matmul(s, v_enc), wo_heads[h])
        injected = proj if injected is None else nm.add(injected, proj)
    return nm.add(o_prime, nm.scale_by(injected, gate))


def _self_attention(attn: AttentionWeights, u: Tensor, cfg: BaseConfig,
                    enc_qkv: list[tuple[Tensor, Tensor, Tensor]] | None,
                    gate: Parameter | None) -> Tensor:
    n = u.shape[0]
    dh = cfg.d_head
    inv_sqrt = 1.0 / math.sqrt(dh)
    mask = causal_mask(n, u.dtype)
    out = None
    q_heads = []
    for h in range(cfg.n_heads):
        u_h = nm.slice_cols(u, h * dh, (h + 1) * dh)
        q = nm.matmul(u_h, attn.wq[h])
        k = nm.matmul(u_h, attn.wk[h])
        v = nm.matmul(u_h, attn.wv[h])
        q_heads.append(q)
        scores = nm.add_const(nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt), mask)
        o_h = nm.matmul(nm.softmax_rows(scores), v)
        proj = nm.matmul(o_h, attn.wo[h])
        out = proj if out is None else nm.add(out, proj)
    if enc_qkv is not None:
        out = adapted_attention(q_heads, enc_qkv, attn.wo, out, gate, dh)
    return out


def _cross_attention(cross: AttentionWeights, u: Tensor, prompt_row: Tensor,
                     cfg: BaseConfig) -> Tensor:
    dh = cfg.d_head
    inv_sqrt = 1.0 / math.sqrt(dh)
    out = None
    for h in range(cfg.n_heads):
        u_h = nm.slice_cols(u, h * dh, (h + 1) * dh)
        p_h = nm.slice_cols(prompt_row, h * dh, (h + 1) * dh)
        q = nm.matmul(u_h, cross.wq[h])
        k = nm.matmul(p_h, cross.wk[h])
        v = nm.matmul(p_h, cross.wv[h])
        s = nm.softmax_rows(nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt))
        proj = nm.matmul(nm.matmul(s, v), cross.wo[h])
        out = proj if out is None else nm.add(out, proj)
    return out


def decoder_forward(model: AdaptedModel, tokens, prompt_id: int,
                    enc_acts: EncoderActivations | None,
                    trace: dict | None = None) -> Tensor:
    """Next-token logits for a token prefix, with optional adaptor injection."""
    cfg = model.config
    base = model.base
    ids = np.asarray(tokens, dtype=np.int64)
    n = ids.shape[0]
    if n > cfg.t_max:
        raise CapacityError(f"sequence length {n} exceeds t_max {cfg.t_max}")
    if cfg.use_cross_attention and not 0 <= prompt_id < cfg.prompt_vocab:
        raise IndexError(f"prompt id {prompt_id} out of range [0, {cfg.prompt_vocab})")

    x = nm.add(nm.embedding_lookup(base.token_emb, ids), nm.slice_rows(base.pos_emb, 0, n))
    prompt_row = (nm.embedding_lookup(base.prompt_emb, [prompt_id])
                  if cfg.use_cross_attention else None)
    inject = enc_acts.qkv if enc_acts is not None and enc_acts.qkv else None
    for i, block in enumerate(base.blocks):
        adapted_index = i - model.first_adapted if model.l_layers else -1
        enc_qkv = inject[adapted_index] if (inject is not None and adapted_index >= 0) else None
        gate = model.adaptor.gates[adapted_index] if (enc_qkv is not None) else None
        u = nm.layer_norm(x, block.attn.ln_gamma, block.attn.ln_beta)
        x = nm.add(x, _self_attention(block.attn, u, cfg, enc_qkv, gate))
        if block.cross is not None:
            u = nm.layer_norm(x, block.cross.ln_gamma, block.cross.ln_beta)
            x = nm.add(x, _cross_attention(block.cross, u, prompt_row, cfg))
        u = nm.layer_norm(x, block.ffn.ln_gamma, block.ffn.ln_beta)
        x = nm.add(x, nm.matmul(nm.relu(nm.matmul(u, block.ffn.w1)), block.ffn.w2))
        if trace is not None:
            trace[f"block{i}"] = float(np.linalg.norm(x.data))
    x = nm.layer_norm(x, base.final_gamma, base.final_beta)
    return nm.matmul(x, base.head_w)


def forward_logits(model: AdaptedModel, tokens, seq: ConditionSequence,
                   prompt_id: int = 0, trace: dict | None = None) -> Tensor:
    """Adapted-model logits; token stream and condition must be frame-aligned."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[0] != seq.n_frames:
        raise AlignmentError(f"{ids.shape[0]} tokens vs {seq.n_frames} condition frames")
    enc_acts = encoder_forward(model, seq) if model.l_layers else None
    return decoder_forward(model, ids, prompt_id, enc_acts, trace=trace)


def base_logits(model: AdaptedModel, tokens, prompt_id: int = 0) -> Tensor:
    """Logits of the frozen base alone (no encoder, no injection)."""
    return decoder_forward(model, tokens, prompt_id, None)


def sample_token(logits_row: np.ndarray, rng: np.random.Generator,
                 temperature: float = 1.0, top_k: int = 0) -> int:
    """Sample from one logits row; temperature <= 0 means greedy."""
    if temperature <= 0.0:
        return int(np.argmax(logits_row))
    z = logits_row.astype(np.float64) / temperature
    if top_k > 0 and top_k < z.shape[0]:
        cutoff = np.partition(z, -top_k)[-top_k]
        z = np.where(z >= cutoff, z, -np.inf)
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    return int(rng.choice(z.shape[0], p=probs))


def generate(model: AdaptedModel, seq: ConditionSequence, prompt_id: int,
             rng: np.random.Generator, temperature: float = 1.0, top_k: int = 0,
             greedy: bool = False, start_token: int | None = None) -> np.ndarray:
    """Autoregressively sample one token per condition frame.

    The encoder runs once over the full condition; each decoding step re-runs
    the decoder on the grown prefix (no key-value caching).
    """
    n = seq.n_frames
    if n > model.config.t_max:
        raise CapacityError(f"generation length {n} exceeds t_max {model.config.t_max}")
    if start_token is None:
        start_token = model.config.vocab_size - 1
    if greedy:
        temperature = 0.0
    enc_acts = encoder_forward(model, seq) if model.l_layers else None
    prefix = [int(start_token)]
    out = []
    for _ in range(n):
        logits = decoder_forward(model, prefix, prompt_id, enc_acts)
        tok = sample_token(logits.data[-1], rng, temperature=temperature, top_k=top_k)
        out.append(tok)
        prefix.append(tok)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def count_parameters(config: BaseConfig, l_layers: int,
                     weight_mode: str = "shared") -> dict[str, float]:
    """Exact total/trainable counts under this artifact's parameterization.

    Mirrors the builders above; a unit test cross-checks it against a
    materialized model's registry.
    """
    if weight_mode not in ("shared", "copied"):
        raise ConfigError(f"unknown weight mode {weight_mode!r}")
    if l_layers > config.n_layers:
        raise ConfigError(f"L={l_layers} exceeds n_layers={config.n_layers}")
    d, dh, nh = config.d_model, config.d_head, config.n_heads
    attn_block = 2 * d + nh * (3 * dh * dh + dh * d)
    ffn_block = 2 * d + 2 * config.ffn_multiplier * d * d
    per_layer = attn_block + ffn_block + (attn_block if config.use_cross_attention else 0)
    total = (config.vocab_size * d + config.t_max * d
             + (config.prompt_vocab * d if config.use_cross_attention else 0)
             + config.n_layers * per_layer
             + 2 * d + d * config.vocab_size)

    trainable = (rep.N_PITCHES * rep.K1 + d * rep.K2 + rep.K1 + rep.K2
                 + config.t_max * rep.JOINT_DIM)
    if l_layers > 0:
        trainable += config.t_max * d                              # encoder input
        trainable += l_layers * (nh * rep.JOINT_DIM * dh + 1)      # per-layer W_e stack + gate
        if weight_mode == "copied":
            total += l_layers * attn_block
    total += trainable
    return {"total": int(total), "trainable": int(trainable),
            "fraction": trainable / total}


# ---------------------------------------------------------------------------
# flat key=value model config block
# ---------------------------------------------------------------------------

def write_model_config(path: str | Path, config: BaseConfig, l_layers: int,
                       mask_rate: float, frame_rate: float) -> None:
    lines = [
        f"n_layers={config.n_layers}",
        f"d_model={config.d_model}",
        f"n_heads={config.n_heads}",
        f"vocab_size={config.vocab_size}",
        f"t_max={config.t_max}",
        f"L={l_layers}",
        f"k1={rep.K1}",
        f"k2={rep.K2}",
        f"r={mask_rate}",
        f"ffn_multiplier={config.ffn_multiplier}",
        f"use_cross_attention={int(config.use_cross_attention)}",
        f"prompt_vocab={config.prompt_vocab}",
        f"frame_rate={frame_rate}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_model_config(path: str | Path) -> tuple[BaseConfig, int, dict[str, float]]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    try:
        config = BaseConfig(
            n_layers=int(values["n_layers"]),
            d_model=int(values["d_model"]),
            n_heads=int(values["n_heads"]),
            vocab_size=int(values["vocab_size"]),
            t_max=int(values["t_max"]),
            ffn_multiplier=int(values.get("ffn_multiplier", 4)),
            use_cross_attention=bool(int(values.get("use_cross_attention", 1))),
            prompt_vocab=int(values.get("prompt_vocab", 4)),
        )
        l_layers = int(values["L"])
        extras = {"r": float(values.get("r", 0.4)),
                  "frame_rate": float(values.get("frame_rate", rep.DEFAULT_FRAME_RATE))}
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    config.validate()
    return config, l_layers, extras
