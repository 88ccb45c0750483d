"""Three-branch LSTM captioner with an optional refined second stage.

Per step, each coarse branch (local / neighboring / global) reads the
previous token embedding concatenated with its region-level feature,
projected to the LSTM input size. The coarse outputs are fused; with two
stages, the refined local branch reads the coarse fused vector while the
refined neighboring/global branches read the matching coarse branch outputs.
The word decoder and the fine attribute head read the last fused vector,
the coarse attribute head reads the coarse fused vector. Attribute logits
are pooled over time before the binary cross-entropy so word order does not
matter.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn_core import (
    FusionGates,
    LSTMParams,
    LSTMState,
    Parameter,
    adaptive_fuse,
    adaptive_fuse_backward,
    binary_cross_entropy,
    linear,
    linear_backward,
    log_softmax,
    lstm_step,
    lstm_step_backward,
    sigmoid,
    softmax_cross_entropy,
)

BRANCHES = ("local", "neighboring", "global")
FRONTENDS = ("graph", "fc", "avg", "max")

SOS, EOS, UNK = "<sos>", "<eos>", "<unk>"


class Vocabulary:
    """Dense token ids; the three special tokens occupy ids 0, 1, 2."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:3] != [SOS, EOS, UNK]:
            raise ValueError("vocabulary must start with <sos>, <eos>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    sos_id = 0
    eos_id = 1
    unk_id = 2

    @classmethod
    def build(cls, captions, max_size: int = 10000) -> "Vocabulary":
        """Keep the ``max_size`` most frequent words (ties lexicographic); specials are extra."""
        counts = Counter(w for cap in captions for w in cap)
        for special in (SOS, EOS, UNK):
            counts.pop(special, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([SOS, EOS, UNK] + [w for w, _ in ranked[:max_size]])

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def encode(self, words) -> list:
        return [self.index.get(w, self.unk_id) for w in words]

    def decode(self, ids) -> list:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class CaptionModelConfig:
    feature_dim: int = 16
    embed_dim: int = 32
    hidden_dim: int = 32
    max_len: int = 10
    vocab_size: int = 200
    fusion: str = "adaptive2"
    stages: int = 2
    frontend: str = "graph"
    k: int = 2
    use_neighboring: bool = True
    use_global: bool = True
    coarse_attr_size: int = 0
    fine_attr_size: int = 0
    attr_pool: str = "max"
    gate_param: str = "softmax"
    bypass_refined: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.stages not in (1, 2):
            raise ValueError(f"stages must be 1 or 2, got {self.stages}")
        if self.frontend not in FRONTENDS:
            raise ValueError(f"unknown neighbor front-end {self.frontend!r}")
        if self.attr_pool not in ("max", "mean"):
            raise ValueError(f"unknown attribute pooling {self.attr_pool!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the specials plus one word")
        if self.stages == 1 and self.coarse_attr_size:
            raise ValueError("a single-stage model has no coarse attribute head")

    @property
    def branches(self) -> tuple:
        return tuple(b for b, on in zip(BRANCHES, (True, self.use_neighboring, self.use_global)) if on)

    @property
    def present(self) -> tuple:
        return (True, self.use_neighboring, self.use_global)

    @property
    def neighbor_input_dim(self) -> int:
        return self.k * self.feature_dim if self.frontend == "fc" else self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class CaptionBatch:
    """Padded teacher-forcing batch.

    ``tokens[b, :lengths[b]]`` is the caption ids of example ``b`` ending in EOS;
    positions past the length are padding and never scored.
    """

    local: np.ndarray
    neighboring: Optional[np.ndarray]
    global_: Optional[np.ndarray]
    tokens: np.ndarray
    lengths: np.ndarray
    a2: Optional[np.ndarray] = None
    a1: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Losses:
    sentence: float
    coarse_attr: float
    fine_attr: float


class CaptionModel:
    def __init__(self, config: CaptionModelConfig, seed: Optional[int] = 0):
        self.config = config
        cfg = config
        rng = None if seed is None else np.random.default_rng(seed)
        s = cfg.init_scale
        d, E, H, V = cfg.feature_dim, cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size
        self.params = {}

        def add(name, shape, scale=s, zero=False):
            if zero or rng is None:
                value = np.zeros(shape)
            else:
                value = rng.uniform(-scale, scale, shape)
            p = Parameter(value, name)
            self.params[name] = p
            return p

        self.embed = add("embed", (V, E))
        if cfg.frontend == "fc":
            self.fc_W = add("frontend.fc.W", (d, cfg.k * d), scale=1.0 / math.sqrt(cfg.k * d))
            self.fc_b = add("frontend.fc.b", (d,), zero=True)
        self.proj = {}
        self.lstm = {}
        for b in cfg.branches:
            self.proj[b] = (add(f"coarse.{b}.proj.W", (E, E + d)), add(f"coarse.{b}.proj.b", (E,), zero=True))
            self.lstm[("coarse", b)] = self._register_lstm(LSTMParams(E, H, rng, s, f"coarse.{b}.lstm"))
        self.fuse_c = self._register_fusion(FusionGates(cfg.fusion, H, cfg.present, cfg.gate_param, rng, "coarse.fuse"))
        self.two_stage = cfg.stages == 2
        if self.two_stage:
            for b in cfg.branches:
                self.lstm[("refined", b)] = self._register_lstm(LSTMParams(H, H, rng, s, f"refined.{b}.lstm"))
            self.fuse_r = self._register_fusion(
                FusionGates(cfg.fusion, H, cfg.present, cfg.gate_param, rng, "refined.fuse"))
        self.dec_W = add("decoder.W", (V, H))
        self.dec_b = add("decoder.b", (V,), zero=True)
        self.coarse_head = None
        self.fine_head = None
        if cfg.coarse_attr_size:
            self.coarse_head = (add("coarse_attr.W", (cfg.coarse_attr_size, H)),
                                add("coarse_attr.b", (cfg.coarse_attr_size,), zero=True))
        if cfg.fine_attr_size:
            self.fine_head = (add("fine_attr.W", (cfg.fine_attr_size, H)),
                              add("fine_attr.b", (cfg.fine_attr_size,), zero=True))

    def _register_lstm(self, lp: LSTMParams) -> LSTMParams:
        for p in lp.parameters():
            self.params[p.name] = p
        return lp

    def _register_fusion(self, fg: FusionGates) -> FusionGates:
        for p in fg.parameters():
            self.params[p.name] = p
        return fg

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict, strict: bool = True):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self.params.items():
            if n in state:
                v = np.asarray(state[n], dtype=np.float64)
                if v.shape != p.value.shape:
                    raise ValueError(f"{n}: shape {v.shape} != {p.value.shape}")
                p.value[...] = v

    # --- one unrolled step ------------------------------------------------

    def _frontend(self, neighboring):
        if neighboring is None or self.config.frontend != "fc":
            return neighboring, None
        return linear(neighboring, self.fc_W, self.fc_b)

    def _init_state(self, batch: int) -> dict:
        H = self.config.hidden_dim
        return {key: LSTMState.zeros(H, batch) for key in self.lstm}

    def _step(self, prev_tokens, feats, state):
        cfg = self.config
        e = self.embed.value[prev_tokens]
        new_state = {}
        coarse_cache = {}
        h_c = {}
        for b in cfg.branches:
            z = np.concatenate([e, feats[b]], axis=1)
            x, lc = linear(z, *self.proj[b])
            st, sc = lstm_step(x, state[("coarse", b)], self.lstm[("coarse", b)])
            new_state[("coarse", b)] = st
            h_c[b] = st.h
            coarse_cache[b] = (lc, sc)
        u, fuse_c_cache = adaptive_fuse(h_c["local"], h_c.get("neighboring"), h_c.get("global"), self.fuse_c)
        cache = {"tokens": prev_tokens, "coarse": coarse_cache, "fuse_c": fuse_c_cache, "u": u}
        a2_logits = None
        if self.coarse_head is not None:
            a2_logits, cache["a2"] = linear(u, *self.coarse_head)
        out = u
        if self.two_stage and not cfg.bypass_refined:
            inputs = {"local": u, "neighboring": h_c.get("neighboring"), "global": h_c.get("global")}
            refined_cache = {}
            h_r = {}
            for b in cfg.branches:
                st, sc = lstm_step(inputs[b], state[("refined", b)], self.lstm[("refined", b)])
                new_state[("refined", b)] = st
                h_r[b] = st.h
                refined_cache[b] = sc
            out, fuse_r_cache = adaptive_fuse(h_r["local"], h_r.get("neighboring"), h_r.get("global"), self.fuse_r)
            cache["refined"] = refined_cache
            cache["fuse_r"] = fuse_r_cache
        elif self.two_stage:
            for b in cfg.branches:
                new_state[("refined", b)] = state[("refined", b)]
        logits, cache["dec"] = linear(out, self.dec_W, self.dec_b)
        a1_logits = None
        if self.fine_head is not None:
            a1_logits, cache["a1"] = linear(out, *self.fine_head)
        return logits, a2_logits, a1_logits, new_state, cache

    def _step_backward(self, dlogits, da2, da1, dstate, cache, dfeats):
        """Backprop one step; ``dstate`` maps cell key -> (dh, dc) of this step's output state.

        Returns the gradient w.r.t. the incoming state in the same layout.
        """
        cfg = self.config
        dout = linear_backward(dlogits, cache["dec"], self.dec_W, self.dec_b)
        if da1 is not None:
            dout = dout + linear_backward(da1, cache["a1"], *self.fine_head)
        dprev = {}
        dh_c = {b: dstate[("coarse", b)][0] for b in cfg.branches}
        if self.two_stage and not cfg.bypass_refined:
            dl, dn, dg = adaptive_fuse_backward(dout, cache["fuse_r"], self.fuse_r)
            dhr = {"local": dl, "neighboring": dn, "global": dg}
            du = None
            for b in cfg.branches:
                dh, dc = dstate[("refined", b)]
                dx, dh_prev, dc_prev = lstm_step_backward(dh + dhr[b], dc, cache["refined"][b],
                                                          self.lstm[("refined", b)])
                dprev[("refined", b)] = (dh_prev, dc_prev)
                if b == "local":
                    du = dx
                else:
                    dh_c[b] = dh_c[b] + dx
        else:
            du = dout
            if self.two_stage:
                for b in cfg.branches:
                    dprev[("refined", b)] = dstate[("refined", b)]
        if da2 is not None:
            du = du + linear_backward(da2, cache["a2"], *self.coarse_head)
        dl, dn, dg = adaptive_fuse_backward(du, cache["fuse_c"], self.fuse_c)
        dfuse = {"local": dl, "neighboring": dn, "global": dg}
        E = cfg.embed_dim
        de = None
        for b in cfg.branches:
            lc, sc = cache["coarse"][b]
            dc = dstate[("coarse", b)][1]
            dx, dh_prev, dc_prev = lstm_step_backward(dh_c[b] + dfuse[b], dc, sc, self.lstm[("coarse", b)])
            dprev[("coarse", b)] = (dh_prev, dc_prev)
            dz = linear_backward(dx, lc, *self.proj[b])
            de = dz[:, :E] if de is None else de + dz[:, :E]
            dfeats[b] += dz[:, E:]
        np.add.at(self.embed.grad, cache["tokens"], de)
        return dprev

    # --- training forward/backward -----------------------------------------

    def _check_batch(self, batch: CaptionBatch):
        V = self.config.vocab_size
        if (batch.tokens < 0).any() or (batch.tokens >= V).any():
            raise IndexError(f"unknown token id (vocabulary size {V})")
        if (batch.lengths < 1).any():
            raise ValueError("every caption needs at least the EOS token")
        if (batch.lengths - 1 > self.config.max_len).any():
            raise ValueError(f"caption longer than max_len={self.config.max_len} words")
        rows = np.arange(batch.size)
        if (batch.tokens[rows, batch.lengths - 1] != Vocabulary.eos_id).any():
            raise ValueError("captions must end with EOS")

    def _feats(self, batch: CaptionBatch):
        feats = {"local": np.asarray(batch.local, dtype=np.float64)}
        fc_cache = None
        if self.config.use_neighboring:
            feats["neighboring"], fc_cache = self._frontend(np.asarray(batch.neighboring, dtype=np.float64))
        if self.config.use_global:
            feats["global"] = np.asarray(batch.global_, dtype=np.float64)
        return feats, fc_cache

    def _pool(self, stacked, mask):
        """Pool ``[S, B, A]`` attribute logits over valid steps; returns pooled and routing weights."""
        if self.config.attr_pool == "max":
            masked = np.where(mask[:, :, None], stacked, -np.inf)
            idx = masked.argmax(axis=0)
            pooled = np.take_along_axis(stacked, idx[None], axis=0)[0]
            route = (np.arange(stacked.shape[0])[:, None, None] == idx[None]).astype(np.float64)
            return pooled, route
        counts = mask.sum(axis=0)[None, :, None]
        route = np.broadcast_to(mask[:, :, None] / counts, stacked.shape)
        return (stacked * route).sum(axis=0), route

    def forward_train(self, batch: CaptionBatch, backward: bool = False, attr_weight: float = 0.0,
                      sentence_weight: float = 1.0) -> Losses:
        """Teacher-forced losses; with ``backward`` accumulates gradients of
        ``sentence_weight * sentence + attr_weight * (coarse_attr + fine_attr)``."""
        self._check_batch(batch)
        cfg = self.config
        B = batch.size
        S = int(batch.lengths.max())
        feats, fc_cache = self._feats(batch)
        state = self._init_state(B)
        mask = np.arange(S)[:, None] < batch.lengths[None, :]
        prev = np.full(B, Vocabulary.sos_id, dtype=np.int64)
        caches, ce_grads, a2s, a1s = [], [], [], []
        sent = 0.0
        inv_len = 1.0 / batch.lengths
        for t in range(S):
            logits, a2, a1, state, cache = self._step(prev, feats, state)
            target = batch.tokens[:, t]
            ce, g = softmax_cross_entropy(logits, target)
            w = mask[t] * inv_len / B
            sent += float(np.dot(w, ce))
            ce_grads.append(g * w[:, None])
            caches.append(cache)
            a2s.append(a2)
            a1s.append(a1)
            prev = target
        coarse_loss = fine_loss = 0.0
        route2 = route1 = None
        if self.coarse_head is not None and batch.a2 is not None:
            pooled2, route2 = self._pool(np.stack(a2s), mask)
            coarse_loss, dpool2 = binary_cross_entropy(pooled2, batch.a2)
        if self.fine_head is not None and batch.a1 is not None:
            pooled1, route1 = self._pool(np.stack(a1s), mask)
            fine_loss, dpool1 = binary_cross_entropy(pooled1, batch.a1)
        losses = Losses(sent, coarse_loss, fine_loss)
        if not backward:
            return losses
        dfeats = {b: np.zeros_like(f) for b, f in feats.items()}
        H = cfg.hidden_dim
        dstate = {key: (np.zeros((B, H)), np.zeros((B, H))) for key in self.lstm}
        for t in range(S - 1, -1, -1):
            da2 = attr_weight * dpool2 * route2[t] if route2 is not None else None
            da1 = attr_weight * dpool1 * route1[t] if route1 is not None else None
            dstate = self._step_backward(sentence_weight * ce_grads[t], da2, da1, dstate, caches[t], dfeats)
        if fc_cache is not None:
            linear_backward(dfeats["neighboring"], fc_cache, self.fc_W, self.fc_b)
        return losses

    # --- inference ----------------------------------------------------------

    def greedy(self, local, neighboring=None, global_=None):
        """Batched beam-1 decoding.

        Returns ``(captions, mean_logprob, a2_probs, a1_probs)``; captions exclude
        EOS, attribute probabilities are pooled over the decoded steps
        (including the EOS step).
        """
        cfg = self.config
        local = np.atleast_2d(np.asarray(local, dtype=np.float64))
        B = local.shape[0]
        batch = CaptionBatch(local,
                             None if neighboring is None else np.atleast_2d(neighboring),
                             None if global_ is None else np.atleast_2d(global_),
                             np.zeros((B, 1), dtype=np.int64), np.ones(B, dtype=np.int64))
        feats, _ = self._feats(batch)
        state = self._init_state(B)
        prev = np.full(B, Vocabulary.sos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        captions = [[] for _ in range(B)]
        logp_sum = np.zeros(B)
        steps = np.zeros(B)
        a2s, a1s, masks = [], [], []
        for _ in range(cfg.max_len):
            logits, a2, a1, state, _ = self._step(prev, feats, state)
            tok = logits.argmax(axis=1)
            lp = log_softmax(logits)[np.arange(B), tok]
            active = ~done
            masks.append(active.copy())
            a2s.append(a2)
            a1s.append(a1)
            logp_sum += np.where(active, lp, 0.0)
            steps += active
            for b in np.flatnonzero(active):
                if tok[b] == Vocabulary.eos_id:
                    done[b] = True
                else:
                    captions[b].append(int(tok[b]))
            prev = tok
            if done.all():
                break
        mask = np.array(masks)
        a2p = a1p = None
        if self.coarse_head is not None:
            a2p = sigmoid(self._pool(np.stack(a2s), mask)[0])
        if self.fine_head is not None:
            a1p = sigmoid(self._pool(np.stack(a1s), mask)[0])
        return captions, logp_sum / steps, a2p, a1p


def make_batch(examples, vocab_size: Optional[int] = None) -> CaptionBatch:
    """Stack example dicts (``local``, ``neighboring``, ``global``, ``caption`` ids
    ending with EOS, optional ``a2``/``a1``) into a padded batch."""
    lengths = np.array([len(ex["caption"]) for ex in examples], dtype=np.int64)
    S = int(lengths.max())
    tokens = np.full((len(examples), S), Vocabulary.eos_id, dtype=np.int64)
    for n, ex in enumerate(examples):
        tokens[n, :len(ex["caption"])] = ex["caption"]

    def stack(key):
        vals = [ex.get(key) for ex in examples]
        if any(v is None for v in vals):
            return None
        return np.stack([np.asarray(v, dtype=np.float64) for v in vals])

    return CaptionBatch(stack("local"), stack("neighboring"), stack("global"), tokens, lengths,
                        stack("a2"), stack("a1"))


def forward_train(local, neighboring, global_, caption, a2_target, a1_target, model: CaptionModel) -> Losses:
    """Single-example teacher-forced losses (no gradient)."""
    ex = {"local": local, "neighboring": neighboring, "global": global_, "caption": list(caption),
          "a2": a2_target, "a1": a1_target}
    return model.forward_train(make_batch([ex]))


def decode_greedy(local, neighboring, global_, model: CaptionModel) -> list:
    return model.greedy(local, neighboring, global_)[0][0]


def attribute_predict(local, neighboring, global_, model: CaptionModel):
    _, _, a2, a1 = model.greedy(local, neighboring, global_)
    return (None if a2 is None else a2[0]), (None if a1 is None else a1[0])
