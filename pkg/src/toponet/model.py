"""Two-stream classifier over traversal-ordered landmark sequences.

Structure stream: landmark coordinates lambda (2 x n) are reordered by the
selection matrix, zeta = lambda @ U, and read by a recurrent learner with soft
attention. Texture stream: each a x a patch is encoded by a small convnet into
psi_i; Psi @ U feeds a second recurrent learner with its own attention. A
gated fusion head combines both contexts:

    eta = softmax(tanh(W_f [T*, S*] + b_f))
    y   = tanh(W_y [(1 + eta_T) H_texture, (1 + eta_S) H_structure] + b_y)

and the training loss is the mean of three focal losses (fusion head plus one
auxiliary head per stream).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import neuralnet as nn
from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class ModelConfig:
    num_landmarks: int = 15
    num_classes: int = 4
    hidden_dim: int = 32
    stream_embed_dim: int = 32  # T*, S*
    fusion_dim: int = 32  # y
    patch_size: int = 17
    patch_embed_dim: int = 16
    conv_channels: tuple = (4, 8)
    cell: str = "lstm"
    bidirectional: bool = False  # experimental: forward and reversed passes concatenated
    peephole: bool = True
    texture_input: str = "patches"  # or "embeddings" (precomputed per-landmark vectors)
    embedding_dim: int = 16  # only for texture_input == "embeddings"
    use_structure: bool = True
    use_texture: bool = True
    use_fusion_gate: bool = True
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.num_landmarks < 2 or self.num_classes < 2:
            raise ValidationError("need at least 2 landmarks and 2 classes")
        if self.cell not in ("lstm", "gru"):
            raise ValidationError(f"unknown cell {self.cell!r}")
        if self.texture_input not in ("patches", "embeddings"):
            raise ValidationError(f"unknown texture_input {self.texture_input!r}")
        if not (self.use_structure or self.use_texture):
            raise ValidationError("at least one stream must be enabled")
        if self.patch_size < 4:
            raise ValidationError("patch_size must be >= 4 (two 2x2 poolings)")

    @property
    def seq_len(self):
        return 2 * self.num_landmarks - 1

    @property
    def context_dim(self):
        return self.hidden_dim * (2 if self.bidirectional else 1)

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def _encoder_flat_dim(cfg):
    side = cfg.patch_size // 2 // 2
    return cfg.conv_channels[1] * side * side


# class-logit heads start at half the Glorot range so an untrained model
# predicts close to uniform
HEAD_GAIN = 0.5


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> nn.ParamStore:
    store = nn.ParamStore()
    H, C, k = cfg.hidden_dim, cfg.context_dim, cfg.num_classes
    rnn = dict(cell=cfg.cell, bidirectional=cfg.bidirectional, peephole=cfg.peephole)
    # structure stream
    nn.init_recurrent(store, rng, "struct.rnn", 2, H, **rnn)
    nn.init_attention(store, rng, "struct.att", C)
    nn.init_dense(store, rng, "struct.aux", C, k, HEAD_GAIN)
    # texture stream
    if cfg.texture_input == "patches":
        c1, c2 = cfg.conv_channels
        nn.init_conv(store, rng, "tex.conv1", 1, c1)
        nn.init_conv(store, rng, "tex.conv2", c1, c2)
        nn.init_dense(store, rng, "tex.embed", _encoder_flat_dim(cfg), cfg.patch_embed_dim)
        tex_in = cfg.patch_embed_dim
    else:
        tex_in = cfg.embedding_dim
    nn.init_recurrent(store, rng, "tex.rnn", tex_in, H, **rnn)
    nn.init_attention(store, rng, "tex.att", C)
    nn.init_dense(store, rng, "tex.aux", C, k, HEAD_GAIN)
    # fusion
    E = cfg.stream_embed_dim
    nn.init_dense(store, rng, "fuse.tenc", C, E)
    nn.init_dense(store, rng, "fuse.senc", C, E)
    nn.init_dense(store, rng, "fuse.gate", 2 * E, 2)
    nn.init_dense(store, rng, "fuse.comb", 2 * C, cfg.fusion_dim)
    nn.init_dense(store, rng, "fuse.cls", cfg.fusion_dim, k, HEAD_GAIN)
    return store


# ---------------------------------------------------------------------------
# streams


def _check_U(U, n):
    if U.ndim != 2 or U.shape != (n, 2 * n - 1):
        raise DimensionError(f"selection matrix must be ({n}, {2 * n - 1}), got {U.shape}")


def structure_forward(cfg, store, coords, U):
    """coords: (B, 2, n) -> H_structure (B, C), aux probabilities (B, k), cache."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    if coords.shape[1:] != (2, cfg.num_landmarks):
        raise DimensionError(f"landmarks must be (2, {cfg.num_landmarks}), got {coords.shape[1:]}")
    _check_U(U, cfg.num_landmarks)
    zeta = coords @ U  # (B, 2, T)
    seq = np.ascontiguousarray(zeta.transpose(0, 2, 1))
    hs, rc = nn.recurrent_forward(store, "struct.rnn", seq, cfg.cell, cfg.bidirectional, cfg.peephole)
    ctx, delta, ac = nn.attention_forward(store, "struct.att", hs)
    logits, dc = nn.dense_forward(store, "struct.aux", ctx)
    probs = nn.softmax(logits)
    return ctx, probs, {"rnn": rc, "att": ac, "aux": dc, "delta": delta, "zeta": zeta}


def structure_backward(store, cache, dctx, dlogits):
    dctx = dctx + nn.dense_backward(store, cache["aux"], dlogits)
    dhs = nn.attention_backward(store, cache["att"], dctx)
    nn.recurrent_backward(store, cache["rnn"], dhs)


def encode_patches(cfg, store, patches):
    """patches: (M, a, a) -> embeddings (M, patch_embed_dim), cache."""
    M = patches.shape[0]
    x = patches.reshape(M, 1, cfg.patch_size, cfg.patch_size)
    a1, c1 = nn.conv_forward(store, "tex.conv1", x)
    p1, s1 = nn.avgpool2_forward(a1)
    a2, c2 = nn.conv_forward(store, "tex.conv2", np.ascontiguousarray(p1))
    p2, s2 = nn.avgpool2_forward(a2)
    flat = p2.reshape(M, -1)
    emb, ec = nn.dense_forward(store, "tex.embed", flat, "tanh")
    return emb, (c1, s1, c2, s2, p2.shape, ec)


def encode_patches_backward(store, cache, demb):
    c1, s1, c2, s2, p2shape, ec = cache
    dflat = nn.dense_backward(store, ec, demb)
    da2 = nn.avgpool2_backward(s2, dflat.reshape(p2shape))
    dp1 = nn.conv_backward(store, c2, da2)
    da1 = nn.avgpool2_backward(s1, dp1)
    nn.conv_backward(store, c1, da1)


def texture_forward(cfg, store, texture, U):
    """texture: patches (B, n, a, a) or precomputed embeddings (B, n, d)."""
    texture = np.asarray(texture, dtype=np.float64)
    n = cfg.num_landmarks
    _check_U(U, n)
    if cfg.texture_input == "patches":
        a = cfg.patch_size
        if texture.ndim == 3:
            texture = texture[None]
        if texture.shape[1:] != (n, a, a):
            raise ValidationError(f"need {n} patches of {a}x{a}, got {texture.shape[1:]}")
        B = texture.shape[0]
        emb, ecache = encode_patches(cfg, store, texture.reshape(B * n, a, a))
        psi = emb.reshape(B, n, -1).transpose(0, 2, 1)  # (B, E, n)
    else:
        if texture.ndim == 2:
            texture = texture[None]
        if texture.shape[1:] != (n, cfg.embedding_dim):
            raise ValidationError(f"need {n} embeddings of dim {cfg.embedding_dim}, got {texture.shape[1:]}")
        B = texture.shape[0]
        ecache = None
        psi = texture.transpose(0, 2, 1)
    seq = np.ascontiguousarray((psi @ U).transpose(0, 2, 1))  # (B, T, E)
    hs, rc = nn.recurrent_forward(store, "tex.rnn", seq, cfg.cell, cfg.bidirectional, cfg.peephole)
    ctx, delta, ac = nn.attention_forward(store, "tex.att", hs)
    logits, dc = nn.dense_forward(store, "tex.aux", ctx)
    probs = nn.softmax(logits)
    cache = {"rnn": rc, "att": ac, "aux": dc, "delta": delta, "enc": ecache, "U": U, "B": B, "seq": seq}
    return ctx, probs, cache


def texture_backward(cfg, store, cache, dctx, dlogits):
    dctx = dctx + nn.dense_backward(store, cache["aux"], dlogits)
    dhs = nn.attention_backward(store, cache["att"], dctx)
    dseq = nn.recurrent_backward(store, cache["rnn"], dhs)
    if cache["enc"] is None:
        return
    B, n = cache["B"], cfg.num_landmarks
    dpsi = dseq.transpose(0, 2, 1) @ cache["U"].T  # (B, E, n)
    demb = np.ascontiguousarray(dpsi.transpose(0, 2, 1)).reshape(B * n, -1)
    encode_patches_backward(store, cache["enc"], demb)


# ---------------------------------------------------------------------------
# fusion


def fuse(cfg, store, h_tex, h_struct):
    """Returns fusion embedding y (B, fusion_dim), class probabilities, gate eta (B, 2), cache."""
    if cfg.use_fusion_gate:
        t_star, tc = nn.dense_forward(store, "fuse.tenc", h_tex, "tanh")
        s_star, sc = nn.dense_forward(store, "fuse.senc", h_struct, "tanh")
        g, gc = nn.dense_forward(store, "fuse.gate", np.concatenate([t_star, s_star], axis=1), "tanh")
        eta = nn.softmax(g)
    else:
        tc = sc = gc = None
        eta = np.zeros((h_tex.shape[0], 2))
    scaled = np.concatenate([(1.0 + eta[:, :1]) * h_tex, (1.0 + eta[:, 1:]) * h_struct], axis=1)
    y, yc = nn.dense_forward(store, "fuse.comb", scaled, "tanh")
    logits, lc = nn.dense_forward(store, "fuse.cls", y)
    probs = nn.softmax(logits)
    cache = {"tc": tc, "sc": sc, "gc": gc, "yc": yc, "lc": lc, "eta": eta, "h_tex": h_tex, "h_struct": h_struct}
    return y, probs, eta, cache


def fuse_backward(cfg, store, cache, dlogits):
    """Returns gradients w.r.t. (H_texture, H_structure)."""
    dy = nn.dense_backward(store, cache["lc"], dlogits)
    dscaled = nn.dense_backward(store, cache["yc"], dy)
    C = cache["h_tex"].shape[1]
    eta = cache["eta"]
    dst, dss = dscaled[:, :C], dscaled[:, C:]
    d_tex = (1.0 + eta[:, :1]) * dst
    d_struct = (1.0 + eta[:, 1:]) * dss
    if cfg.use_fusion_gate:
        deta = np.stack([(dst * cache["h_tex"]).sum(1), (dss * cache["h_struct"]).sum(1)], axis=1)
        dg = nn.softmax_backward(eta, deta)
        dts = nn.dense_backward(store, cache["gc"], dg)
        E = dts.shape[1] // 2
        d_tex = d_tex + nn.dense_backward(store, cache["tc"], dts[:, :E])
        d_struct = d_struct + nn.dense_backward(store, cache["sc"], dts[:, E:])
    return d_tex, d_struct


# ---------------------------------------------------------------------------
# full model


@dataclass
class Outputs:
    fusion_probs: np.ndarray
    structure_probs: np.ndarray | None
    texture_probs: np.ndarray | None
    eta: np.ndarray
    y: np.ndarray


def forward(cfg, store, coords, texture, U):
    """Full forward pass. Disabled streams contribute a zero context and no loss."""
    B = np.asarray(coords).shape[0] if np.asarray(coords).ndim == 3 else 1
    C = cfg.context_dim
    sc = tc = None
    if cfg.use_structure:
        h_s, p_s, sc = structure_forward(cfg, store, coords, U)
    else:
        h_s, p_s = np.zeros((B, C)), None
    if cfg.use_texture:
        h_t, p_t, tc = texture_forward(cfg, store, texture, U)
    else:
        h_t, p_t = np.zeros((B, C)), None
    y, p_f, eta, fc = fuse(cfg, store, h_t, h_s)
    return Outputs(p_f, p_s, p_t, eta, y), {"s": sc, "t": tc, "f": fc}


def total_loss(fusion_probs, structure_probs, texture_probs, target, gamma=2.0, alpha=0.25):
    """Mean of the focal losses of the available heads (three when both streams
    run), averaged over the batch."""
    terms = [p for p in (fusion_probs, structure_probs, texture_probs) if p is not None]
    target = np.atleast_1d(np.asarray(target))
    per = [nn.focal_loss(np.atleast_2d(p), target, gamma, alpha) for p in terms]
    return float(np.mean(np.mean(per, axis=0)))


def loss_and_grad(cfg, store, coords, texture, U, target):
    """Forward + backward; gradients land in ``store.grads`` (zeroed first)."""
    out, cache = forward(cfg, store, coords, texture, U)
    target = np.asarray(target)
    g, a = cfg.focal_gamma, cfg.focal_alpha
    loss = total_loss(out.fusion_probs, out.structure_probs, out.texture_probs, target, g, a)
    store.zero_grad()
    heads = sum(p is not None for p in (out.fusion_probs, out.structure_probs, out.texture_probs))
    scale = 1.0 / (heads * len(target))
    dl_f = nn.focal_loss_grad_logits(out.fusion_probs, target, g, a) * scale
    d_tex, d_struct = fuse_backward(cfg, store, cache["f"], dl_f)
    if cfg.use_structure:
        dl_s = nn.focal_loss_grad_logits(out.structure_probs, target, g, a) * scale
        structure_backward(store, cache["s"], d_struct, dl_s)
    if cfg.use_texture:
        dl_t = nn.focal_loss_grad_logits(out.texture_probs, target, g, a) * scale
        texture_backward(cfg, store, cache["t"], d_tex, dl_t)
    return loss, out


def predict(cfg, store, coords, texture, U):
    """Class indices (argmax, lowest index on ties) and fusion probabilities."""
    out, _ = forward(cfg, store, coords, texture, U)
    return np.argmax(out.fusion_probs, axis=1), out.fusion_probs
