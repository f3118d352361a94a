"""Relation-enhanced attention recurrent forecaster.

Pipeline per batch of samples:

1. fuse city/age/gender embeddings into group vectors, enhance groups and
   elements by one relation message pass;
2. encode ``[g*, f*, m_t, y_t]`` with an LSTM, predicting the next value at
   every history step;
3. decode ``[g*, f*, m_t]`` for the horizon with a bidirectional LSTM whose
   forward direction starts from the final encoder state;
4. attend from every decoder state to each sliding window of encoder states,
   fuse the per-window summaries with a second attention, and predict from
   ``W_x [h_d, x] + b_x``.

All steps run on whole batches; attention is evaluated for every decoder
step at once since it does not feed back into the recurrence.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .relations import (Vocab, alpha_matrix, element_message_pass, embed_groups,
                        group_matrix, group_message_pass)

RELATION_MODES = ("none", "group", "element", "both")


@dataclass
class ModelConfig:
    T: int = 48
    T_prime: int = 18
    window: int = 24
    stride: int = 2
    D: int = 10
    H: int = 50
    relations: str = "both"
    attention: bool = True
    use_group: bool = True
    use_element: bool = True
    use_time: bool = True
    steps_per_year: int = 24

    def __post_init__(self):
        if self.T < 1 or self.T_prime < 2:
            raise ConfigError(f"need T >= 1 and T' > 1, got T={self.T}, T'={self.T_prime}")
        if self.relations not in RELATION_MODES:
            raise ConfigError(f"relations must be one of {RELATION_MODES}")
        if self.attention:
            window_count(self.T, self.window, self.stride)

    @property
    def A(self):
        return 2 * self.H

    @property
    def M(self):
        return window_count(self.T, self.window, self.stride)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def window_count(T, window, stride):
    if not 1 <= window <= T:
        raise ConfigError(f"attention window {window} must lie in [1, T={T}]")
    if stride < 1:
        raise ConfigError(f"sliding step {stride} must be >= 1")
    return (T - window) // stride + 1


def window_indices(T, window, stride):
    """(M, window) encoder positions of each sliding sub-sequence.

    Trailing steps not covered by a full window are left out.
    """
    M = window_count(T, window, stride)
    return np.arange(M)[:, None] * stride + np.arange(window)[None, :]


# ----------------------------------------------------------------- parameters

def param_shapes(cfg, vocab):
    D, H, A = cfg.D, cfg.H, cfg.A
    enc_in, dec_in = 3 * D + 1, 3 * D
    return {
        "emb.city": (len(vocab.cities), D),
        "emb.age": (len(vocab.ages), D),
        "emb.gender": (len(vocab.genders), D),
        "emb.element": (len(vocab.elements), D),
        "emb.time": (cfg.steps_per_year, D),
        "group_fuse.W": (D, 3 * D), "group_fuse.b": (D,),
        "group_msg.W": (D, 2 * D), "group_msg.b": (D,),
        "element_msg.W": (D, 2 * D), "element_msg.b": (D,),
        "encoder.W_ih": (4 * H, enc_in), "encoder.W_hh": (4 * H, H), "encoder.b": (4 * H,),
        "decoder_fwd.W_ih": (4 * H, dec_in), "decoder_fwd.W_hh": (4 * H, H),
        "decoder_fwd.b": (4 * H,),
        "decoder_bwd.W_ih": (4 * H, dec_in), "decoder_bwd.W_hh": (4 * H, H),
        "decoder_bwd.b": (4 * H,),
        "att_temporal.W": (A, 2 * H), "att_temporal.V": (A, H), "att_temporal.b": (A,),
        "att_temporal.v": (1, A),
        "att_proj.W": (2 * H, H), "att_proj.b": (2 * H,),
        "att_fusion.W": (A, 2 * H), "att_fusion.V": (A, 2 * H), "att_fusion.b": (A,),
        "att_fusion.v": (1, A),
        "enhance.W": (2 * H, 4 * H), "enhance.b": (2 * H,),
        "head_enc.W": (1, H), "head_enc.b": (1,),
        "head_dec.W": (1, 2 * H), "head_dec.b": (1,),
    }


ATTENTION_PARAMS = ("att_temporal.", "att_proj.", "att_fusion.", "enhance.")


def init_params(cfg, vocab, seed=0):
    """Uniform(-k, k) with k = 1/sqrt(fan_in); LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg, vocab)
    params = {}
    for name, shape in shapes.items():
        prefix, kind = name.rsplit(".", 1)
        if name.startswith("emb."):
            fan_in = cfg.D
        elif kind.startswith("b"):
            w = shapes.get(f"{prefix}.W") or shapes[f"{prefix}.W_ih"]
            fan_in = w[1] + (cfg.H if f"{prefix}.W_hh" in shapes else 0)
        elif kind == "W_ih":
            fan_in = shape[1] + cfg.H
        else:
            fan_in = shape[1]
        k = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-k, k, size=shape)
    H = cfg.H
    for prefix in ("encoder", "decoder_fwd", "decoder_bwd"):
        params[f"{prefix}.b"][H:2 * H] = 1.0
    return params


# ------------------------------------------------------------------ operations

def lstm_cell(v, h_prev, c_prev, W_ih, W_hh, b):
    """One LSTM step with i, f, o sigmoid gates and a tanh candidate.

    Works on a single vector or a (B, .) batch. Returns ``(h, c)``.
    """
    v, h_prev, c_prev = ad.as_tensor(v), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    single = v.data.ndim == 1
    if single:
        v, h_prev, c_prev = (ad.reshape(x, (1, -1)) for x in (v, h_prev, c_prev))
    z = ad.linear(v, W_ih, b) + ad.linear(h_prev, W_hh)
    h, c = ad.lstm_pointwise(z, c_prev)
    if single:
        h, c = ad.reshape(h, (-1,)), ad.reshape(c, (-1,))
    return h, c


def _run_lstm(Zx, h, c, W_hh, reverse=False):
    """Unroll over axis 1 of precomputed input projections ``Zx`` (B, L, 4H)."""
    L = Zx.shape[1]
    order = range(L - 1, -1, -1) if reverse else range(L)
    out = [None] * L
    for t in order:
        z = Zx[:, t] + ad.linear(h, W_hh)
        h, c = ad.lstm_pointwise(z, c)
        out[t] = h
    return ad.stack(out, axis=1), h, c


def sliding_subsequences(states, window, stride):
    """Split encoder states (..., T, H) into (..., M, window, H) windows."""
    states = ad.as_tensor(states)
    idx = window_indices(states.shape[-2], window, stride)
    return ad.take(states, idx, axis=-2)


def temporal_attention(h_dec, sub, W_p, V_p, b_p, v_p, W_d, b_d):
    """Attend from decoder state(s) to one window of encoder states.

    ``h_dec`` is (2H,) and ``sub`` (Ta, H). Returns ``(d, gamma, context)``.
    """
    h_dec, sub = ad.as_tensor(h_dec), ad.as_tensor(sub)
    e = ad.tanh(ad.linear(h_dec, W_p, b_p) + ad.linear(sub, V_p))
    p = ad.reshape(ad.linear(e, v_p), (sub.shape[0],))
    gamma = ad.softmax(p)
    context = ad.einsum("i,ih->h", gamma, sub)
    d = ad.relu(ad.linear(context, W_d, b_d))
    return d, gamma, context


def multimodal_fusion(h_dec, ds, W_q, V_q, b_q, v_q):
    """Fuse per-window vectors ``ds`` (M, K) with attention from ``h_dec``.

    Returns ``(x, phi)``.
    """
    h_dec, ds = ad.as_tensor(h_dec), ad.as_tensor(ds)
    e = ad.tanh(ad.linear(h_dec, W_q, b_q) + ad.linear(ds, V_q))
    q = ad.reshape(ad.linear(e, v_q), (ds.shape[0],))
    phi = ad.softmax(q)
    return ad.einsum("m,mk->k", phi, ds), phi


def enhance_and_predict(h_dec, x, W_x, b_x, W_head, b_head, attention=True):
    """Prediction head on ``W_x [h_d, x] + b_x`` (or on ``h_d`` when attention is off)."""
    h = ad.linear(ad.concat([h_dec, x], axis=-1), W_x, b_x) if attention else ad.as_tensor(h_dec)
    y = ad.linear(h, W_head, b_head)
    return ad.reshape(y, y.shape[:-1])


def rear_loss(enc_pred, enc_target, dec_pred, dec_target):
    """L1 on next-step encoder predictions plus L1 on the horizon."""
    enc_pred, dec_pred = ad.as_tensor(enc_pred), ad.as_tensor(dec_pred)
    enc_target = np.asarray(getattr(enc_target, "data", enc_target), dtype=np.float64)
    dec_target = np.asarray(getattr(dec_target, "data", dec_target), dtype=np.float64)
    if enc_pred.shape != enc_target.shape or dec_pred.shape != dec_target.shape:
        raise DimensionError(f"rear_loss: encoder {enc_pred.shape} vs {enc_target.shape}, "
                             f"decoder {dec_pred.shape} vs {dec_target.shape}")
    return ad.l1_loss(enc_pred, enc_target) + ad.l1_loss(dec_pred, dec_target)


# ---------------------------------------------------------------------- model

@dataclass
class Batch:
    group_idx: np.ndarray
    element_idx: np.ndarray
    history: np.ndarray
    future: np.ndarray
    history_positions: np.ndarray
    future_positions: np.ndarray

    def __len__(self):
        return self.history.shape[0]


class RearModel:
    """Parameters, graphs and configuration of one trained forecaster."""

    def __init__(self, cfg, vocab, alpha, params=None, seed=0):
        self.cfg = cfg
        self.vocab = vocab
        self.alpha = dict(alpha)
        self.seed = seed
        self.A = alpha_matrix(vocab, self.alpha)
        self.Bm = group_matrix(vocab)
        self.attr_idx = vocab.attribute_indices()
        self.params = init_params(cfg, vocab, seed) if params is None else params
        expected = param_shapes(cfg, vocab)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise ConfigError(f"parameter {name}: expected shape {shape}, got {got}")

    def batch(self, samples):
        v = self.vocab
        return Batch(
            np.array([v.group_index(s.key[0]) for s in samples], dtype=np.intp),
            np.array([v.element_index(s.key[1]) for s in samples], dtype=np.intp),
            np.stack([s.history for s in samples]),
            np.stack([s.future for s in samples]),
            np.stack([s.history_positions for s in samples]).astype(np.intp),
            np.stack([s.future_positions for s in samples]).astype(np.intp))

    def enhanced_embeddings(self, P):
        """Relation-enhanced group (G, D) and element (E, D) embeddings."""
        cfg = self.cfg
        G = embed_groups(P["emb.city"], P["emb.age"], P["emb.gender"], self.attr_idx,
                         P["group_fuse.W"], P["group_fuse.b"])
        G_star = group_message_pass(G, self.Bm, P["group_msg.W"], P["group_msg.b"],
                                    enabled=cfg.relations in ("group", "both"))
        F_star = element_message_pass(P["emb.element"], self.A, P["element_msg.W"],
                                      P["element_msg.b"],
                                      enabled=cfg.relations in ("element", "both"))
        return G_star, F_star

    def forward(self, batch, tape=None, internals=False, overrides=None):
        """Encoder and decoder predictions, (B, T) and (B, T').

        With a ``tape`` every parameter is a leaf on it; the returned dict then
        also carries ``"leaves"`` (name -> tensor). ``overrides`` maps names to
        tensors used in place of the stored parameters.
        """
        cfg, H, D = self.cfg, self.cfg.H, self.cfg.D
        B, T = batch.history.shape
        Tp = batch.future_positions.shape[1]
        if batch.history_positions.shape != (B, T):
            raise DimensionError(f"history {batch.history.shape} vs positions "
                                 f"{batch.history_positions.shape}")
        if tape is None:
            P = {k: ad.Tensor(v) for k, v in self.params.items()}
        else:
            P = {k: tape.leaf(v) for k, v in self.params.items()}
        if overrides:
            P.update(overrides)

        G_star, F_star = self.enhanced_embeddings(P)
        zeros = ad.Tensor(np.zeros((B, D)))
        gs = ad.take(G_star, batch.group_idx) if cfg.use_group else zeros
        fs = ad.take(F_star, batch.element_idx) if cfg.use_element else zeros

        def features(pos):
            L = pos.shape[1]
            m = ad.take(P["emb.time"], pos) if cfg.use_time else ad.Tensor(np.zeros((B, L, D)))
            return [ad.broadcast_to(ad.reshape(gs, (B, 1, D)), (B, L, D)),
                    ad.broadcast_to(ad.reshape(fs, (B, 1, D)), (B, L, D)), m]

        # encoder
        v_enc = ad.concat(features(batch.history_positions)
                          + [ad.Tensor(batch.history[:, :, None])], axis=-1)
        Zx = ad.linear(v_enc, P["encoder.W_ih"], P["encoder.b"])
        h0 = ad.Tensor(np.zeros((B, H)))
        HE, hT, cT = _run_lstm(Zx, h0, h0, P["encoder.W_hh"])
        enc = ad.linear(HE, P["head_enc.W"], P["head_enc.b"])
        enc = ad.reshape(enc, (B, T))

        # bidirectional decoder, no observed values enter
        v_dec = ad.concat(features(batch.future_positions), axis=-1)
        Zf = ad.linear(v_dec, P["decoder_fwd.W_ih"], P["decoder_fwd.b"])
        Zb = ad.linear(v_dec, P["decoder_bwd.W_ih"], P["decoder_bwd.b"])
        Hf, _, _ = _run_lstm(Zf, hT, cT, P["decoder_fwd.W_hh"])
        Hb, _, _ = _run_lstm(Zb, h0, h0, P["decoder_bwd.W_hh"], reverse=True)
        HD = ad.concat([Hf, Hb], axis=-1)

        out = {"encoder": enc, "encoder_states": HE, "decoder_states": HD}
        if cfg.attention:
            X = self._attend(P, HE, HD, out if internals else None)
            Hs = ad.linear(ad.concat([HD, X], axis=-1), P["enhance.W"], P["enhance.b"])
        else:
            Hs = HD
        dec = ad.linear(Hs, P["head_dec.W"], P["head_dec.b"])
        out["decoder"] = ad.reshape(dec, (B, Tp))
        if tape is not None:
            out["leaves"] = P
        return out

    def _attend(self, P, HE, HD, internals=None):
        cfg = self.cfg
        B, T, H = HE.shape
        Tp, A = HD.shape[1], cfg.A
        idx = window_indices(T, cfg.window, cfg.stride)
        M, Ta = idx.shape
        cover = int(idx[-1, -1]) + 1
        # scores depend on (decoder step, encoder position) only, so they are
        # computed once per covered position and gathered into windows
        Qp = ad.linear(HD, P["att_temporal.W"], P["att_temporal.b"])
        Kp = ad.linear(HE[:, :cover], P["att_temporal.V"])
        scores = ad.additive_scores(Qp, Kp, ad.reshape(P["att_temporal.v"], (A,)))
        gamma = ad.softmax(ad.take(scores, idx, axis=2), axis=-1)
        # W_d sum_i gamma_i h_i == sum_i gamma_i (W_d h_i): project the T
        # encoder states once instead of every (step, window) context
        proj = ad.take(ad.linear(HE[:, :cover], P["att_proj.W"]), idx, axis=1)
        gamma_t = ad.transpose(gamma, (0, 2, 1, 3))
        pre = ad.transpose(ad.bmm(gamma_t, proj), (0, 2, 1, 3))
        d = ad.relu(pre + P["att_proj.b"])
        Qq = ad.linear(HD, P["att_fusion.W"], P["att_fusion.b"])
        Kq = ad.linear(d, P["att_fusion.V"])
        q = ad.additive_scores(Qq, Kq, ad.reshape(P["att_fusion.v"], (A,)))
        phi = ad.softmax(q, axis=-1)
        x = ad.reshape(ad.bmm(ad.reshape(phi, (B, Tp, 1, M)), d), (B, Tp, 2 * H))
        if internals is not None:
            windows = ad.take(HE, idx, axis=1)
            context = ad.transpose(ad.bmm(gamma_t, windows), (0, 2, 1, 3))
            internals.update(gamma=gamma, phi=phi, context=context, windows=windows, d=d, x=x)
        return x

    def loss(self, batch, tape=None, overrides=None):
        out = self.forward(batch, tape, overrides=overrides)
        enc = out["encoder"][:, :-1]
        return rear_loss(enc, batch.history[:, 1:], out["decoder"], batch.future), out

    def loss_and_grads(self, batch):
        tape = ad.Tape()
        L, out = self.loss(batch, tape)
        if L.node is None:
            return float(L.data), {k: np.zeros_like(v) for k, v in self.params.items()}
        grads = ad.backward(tape, L)
        leaves = out["leaves"]
        return float(L.data), {k: (grads[t.node] if grads[t.node] is not None
                                    else np.zeros_like(self.params[k]))
                               for k, t in leaves.items()}

    def predict(self, batch, chunk=256):
        """Decoder forecasts (normalized scale) without recording a tape."""
        outs = []
        for s in range(0, len(batch), chunk):
            sub = Batch(*(getattr(batch, f.name)[s:s + chunk] for f in fields(Batch)))
            outs.append(self.forward(sub)["decoder"].data)
        return np.concatenate(outs, axis=0)

    # ------------------------------------------------------------ persistence

    def to_dict(self, extra=None):
        return {
            "format": "trendcast-checkpoint/1",
            "config": asdict(self.cfg),
            "seed": self.seed,
            "vocab": self.vocab.to_dict(),
            "alpha": [[p, c, w] for (p, c), w in sorted(self.alpha.items())],
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
            **(extra or {}),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "trendcast-checkpoint/1":
            raise ConfigError("not a trendcast checkpoint")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        alpha = {(p, c): w for p, c, w in d["alpha"]}
        return cls(ModelConfig.from_dict(d["config"]), Vocab.from_dict(d["vocab"]), alpha,
                   params, d.get("seed", 0))


def save_checkpoint(model, path, extra=None):
    Path(path).write_text(json.dumps(model.to_dict(extra), sort_keys=True) + "\n",
                          encoding="utf-8")


def load_checkpoint(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} not found") from None
    return RearModel.from_dict(d), d
