"""Instance matching: bidirectional alignment at instance, class and episode
granularity, fusion, and pooled comparison into instance-wise matching vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .functional import dropout, glorot, linear, match_features, pool_max_avg
from .tensor import Tensor, concat, softmax

LEVELS = ("instance", "class", "episode")
_LEVEL_LAYER = {"instance": "H1", "class": "H2", "episode": "H3"}


@dataclass(frozen=True)
class AblationFlags:
    use_instance: bool = True
    use_class: bool = True
    use_episode: bool = True

    @property
    def levels(self):
        on = (self.use_instance, self.use_class, self.use_episode)
        return tuple(lvl for lvl, flag in zip(LEVELS, on) if flag)

    @classmethod
    def without(cls, *levels):
        bad = set(levels) - set(LEVELS)
        if bad:
            raise ValueError(f"unknown levels {sorted(bad)}")
        return cls(*(lvl not in levels for lvl in LEVELS))


@dataclass
class ContextSeq:
    """Row-concatenation of several encoded sequences."""

    hidden: Tensor
    boundaries: tuple  # cumulative end offsets

    @classmethod
    def from_members(cls, members):
        if not members:
            raise DataError("context needs at least one member")
        ends = tuple(int(x) for x in np.cumsum([m.shape[0] for m in members]))
        return cls(concat(members, axis=0), ends)

    @property
    def length(self):
        return self.boundaries[-1]


@dataclass
class AlignedViews:
    q_inst: Tensor | None = None
    q_class: Tensor | None = None
    q_epi: Tensor | None = None
    s_inst: Tensor | None = None
    s_class: Tensor | None = None
    s_epi: Tensor | None = None

    def query_views(self):
        return {"instance": self.q_inst, "class": self.q_class, "episode": self.q_epi}

    def support_views(self):
        return {"instance": self.s_inst, "class": self.s_class, "episode": self.s_epi}


def init_matching(params, d, flags, rng, prefix="match."):
    if flags.levels:  # F only feeds the alignments
        params.add(prefix + "F.weight", glorot(rng, d, d))
        params.add(prefix + "F.bias", np.zeros(d))
    for level in flags.levels:
        name = _LEVEL_LAYER[level]
        params.add(prefix + f"{name}.weight", glorot(rng, 4 * d, d))
        params.add(prefix + f"{name}.bias", np.zeros(d))
    if flags.levels:
        width = d * len(flags.levels)
        params.add(prefix + "H.weight", glorot(rng, width, d))
        params.add(prefix + "H.bias", np.zeros(d))
    params.add(prefix + "G.weight", glorot(rng, 8 * d, d))
    params.add(prefix + "G.bias", np.zeros(d))


class Matcher:
    """Binds the matching-layer parameters with dropout state.

    ``trace``, when a list, collects every alignment weight matrix in
    row-stochastic orientation.
    """

    def __init__(self, params, flags, dropout_rate=0.0, training=False, rng=None,
                 prefix="match.", trace=None):
        self.params = params
        self.flags = flags
        self.dropout_rate = dropout_rate
        self.training = training
        self.rng = rng
        self.prefix = prefix
        self.trace = trace

    def layer(self, name, x, activation="relu"):
        x = dropout(x, self.dropout_rate, self.training, self.rng)
        p = self.prefix + name
        return linear(x, self.params[p + ".weight"], self.params[p + ".bias"], activation)

    def project(self, x):
        return self.layer("F", x)

    def fuse_level(self, level, orig, aligned):
        return self.layer(_LEVEL_LAYER[level], match_features(orig, aligned))


def bi_align(a, b, project, *, fa=None, fb=None, a_mask=None, b_mask=None,
             need_b=True, trace=None):
    """Soft-align two token sequences against each other.

    Energies are ``project(a_i) . project(b_j)``; ``a_hat`` attends over the
    rows of ``b`` and ``b_hat`` over the rows of ``a``.  Inputs may carry
    matching leading batch dimensions; masks mark real tokens.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"bi_align width mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ShapeError("bi_align needs non-empty sequences")
    fa = project(a) if fa is None else fa
    fb = project(b) if fb is None else fb
    energy = fa @ fb.swapaxes(-1, -2)
    w_a = softmax(energy, axis=-1, mask=None if b_mask is None else b_mask[..., None, :])
    a_hat = w_a @ b
    if trace is not None:
        trace.append(w_a.data)
    if not need_b:
        return a_hat, None
    w_b = softmax(energy, axis=-2, mask=None if a_mask is None else a_mask[..., :, None])
    b_hat = w_b.swapaxes(-1, -2) @ a
    if trace is not None:
        trace.append(np.swapaxes(w_b.data, -1, -2))
    return a_hat, b_hat


def _as_tensor(x):
    return getattr(x, "hidden", x)


def multi_grained_align(q, supports, flags, matcher):
    """Aligned views for every (class n, shot k) pair of one query.

    ``supports`` is a list of N lists of K encoded sequences.  The
    class-aware query view is computed once per class and the episode-aware
    one once per episode.  Returns ``{(n, k): AlignedViews}``.
    """
    q = _as_tensor(q)
    supports = [[_as_tensor(s) for s in row] for row in supports]
    if not supports or any(not row for row in supports):
        raise DataError("multi_grained_align needs a non-empty support set")
    trace = matcher.trace
    project = matcher.project
    class_ctx = [ContextSeq.from_members(row).hidden for row in supports]
    episode_ctx = ContextSeq.from_members([s for row in supports for s in row]).hidden

    q_class = {}
    if flags.use_class:
        for n, ctx in enumerate(class_ctx):
            q_class[n] = bi_align(q, ctx, project, need_b=False, trace=trace)[0]
    q_epi = None
    if flags.use_episode:
        q_epi = bi_align(q, episode_ctx, project, need_b=False, trace=trace)[0]

    out = {}
    for n, row in enumerate(supports):
        for k, s in enumerate(row):
            views = AlignedViews()
            if flags.use_instance:
                views.q_inst, views.s_inst = bi_align(q, s, project, trace=trace)
            if flags.use_class:
                views.q_class = q_class[n]
                views.s_class = bi_align(s, class_ctx[n], project, need_b=False, trace=trace)[0]
            if flags.use_episode:
                views.q_epi = q_epi
                views.s_epi = bi_align(s, episode_ctx, project, need_b=False, trace=trace)[0]
            out[(n, k)] = views
    return out


def fuse(q, s, views, flags, matcher):
    """Fuse originals with their aligned views; identity when no level is on."""
    q, s = _as_tensor(q), _as_tensor(s)
    levels = flags.levels
    if not levels:
        return q, s
    qv, sv = views.query_views(), views.support_views()
    for level in levels:
        if qv[level] is None or sv[level] is None:
            raise DataError(f"missing aligned view for enabled level {level!r}")
    q_parts = [matcher.fuse_level(lvl, q, qv[lvl]) for lvl in levels]
    s_parts = [matcher.fuse_level(lvl, s, sv[lvl]) for lvl in levels]
    return matcher.layer("H", concat(q_parts, axis=-1)), matcher.layer("H", concat(s_parts, axis=-1))


def instance_match(q_fused, s_fused, matcher, q_mask=None, s_mask=None):
    """Pool both sides to ``[max; avg]`` and compare with G."""
    if q_fused.shape[-1] != s_fused.shape[-1]:
        raise ShapeError(f"width mismatch {q_fused.shape[-1]} vs {s_fused.shape[-1]}")
    qv = pool_max_avg(q_fused, q_mask)
    sv = pool_max_avg(s_fused, s_mask)
    return matcher.layer("G", match_features(qv, sv))


@dataclass
class SupportContext:
    """Query-independent support-side state of one episode.

    ``fused`` holds the support fusions for the class and episode levels,
    which depend only on the support set and are shared by every query.
    """

    hs: Tensor  # (N*K, Ls, D), class-major
    ms: np.ndarray
    fs: Tensor
    n_way: int
    k_shot: int
    fused: dict


def support_context(hs, ms, n_way, k_shot, matcher):
    """Project the supports and fuse their class- and episode-level views."""
    nk, ls, d = hs.shape
    if nk != n_way * k_shot:
        raise ShapeError(f"expected {n_way * k_shot} supports, got {nk}")
    flags, trace = matcher.flags, matcher.trace
    fs = matcher.project(hs) if flags.levels else None
    fused = {}
    if flags.use_class:
        ctx = hs.reshape(n_way, 1, k_shot * ls, d)
        fctx = fs.reshape(n_way, 1, k_shot * ls, d)
        cmask = ms.reshape(n_way, 1, k_shot * ls)
        s_c, _ = bi_align(hs.reshape(n_way, k_shot, ls, d), ctx, None,
                          fa=fs.reshape(n_way, k_shot, ls, d), fb=fctx,
                          b_mask=cmask, need_b=False, trace=trace)
        fused["class"] = matcher.fuse_level("class", hs, s_c.reshape(nk, ls, d))
    if flags.use_episode:
        s_e, _ = bi_align(hs, hs.reshape(nk * ls, d), None, fa=fs, fb=fs.reshape(nk * ls, d),
                          b_mask=ms.reshape(nk * ls), need_b=False, trace=trace)
        fused["episode"] = matcher.fuse_level("episode", hs, s_e)
    return SupportContext(hs, ms, fs, n_way, k_shot, fused)


def query_match_vectors(hq, mq, ctx, matcher):
    """Instance-wise matching vectors ``(R, N*K, D)`` of padded queries against a context."""
    flags, trace = matcher.flags, matcher.trace
    hs, ms, fs = ctx.hs, ctx.ms, ctx.fs
    n_way, k_shot = ctx.n_way, ctx.k_shot
    r, lq, d = hq.shape
    nk, ls, _ = hs.shape
    fq = matcher.project(hq) if flags.levels else None
    q_b = hq.reshape(r, 1, lq, d)
    s_b = hs.reshape(1, nk, ls, d)
    q_full = (r, nk, lq, d)
    s_full = (r, nk, ls, d)
    q_parts, s_parts = [], []

    if flags.use_instance:
        q_i, s_i = bi_align(q_b, s_b, None, fa=fq.reshape(r, 1, lq, d), fb=fs.reshape(1, nk, ls, d),
                            a_mask=mq[:, None, :], b_mask=ms[None, :, :], trace=trace)
        q_parts.append(matcher.fuse_level("instance", q_b, q_i))
        s_parts.append(matcher.fuse_level("instance", s_b, s_i))

    if flags.use_class:
        ctx_h = hs.reshape(1, n_way, k_shot * ls, d)
        fctx = fs.reshape(1, n_way, k_shot * ls, d)
        cmask = ms.reshape(1, n_way, k_shot * ls)
        q_c, _ = bi_align(q_b, ctx_h, None, fa=fq.reshape(r, 1, lq, d), fb=fctx,
                          b_mask=cmask, need_b=False, trace=trace)
        fused = matcher.fuse_level("class", q_b, q_c)
        fused = fused.reshape(r, n_way, 1, lq, d).broadcast_to((r, n_way, k_shot, lq, d))
        q_parts.append(fused.reshape(q_full))
        s_parts.append(ctx.fused["class"].reshape(1, nk, ls, d).broadcast_to(s_full))

    if flags.use_episode:
        q_e, _ = bi_align(hq, hs.reshape(nk * ls, d), None, fa=fq, fb=fs.reshape(nk * ls, d),
                          b_mask=ms.reshape(nk * ls), need_b=False, trace=trace)
        fused = matcher.fuse_level("episode", hq, q_e)
        q_parts.append(fused.reshape(r, 1, lq, d).broadcast_to(q_full))
        s_parts.append(ctx.fused["episode"].reshape(1, nk, ls, d).broadcast_to(s_full))

    if q_parts:
        q_fused = matcher.layer("H", concat(q_parts, axis=-1))
        s_fused = matcher.layer("H", concat(s_parts, axis=-1))
    else:
        q_fused = q_b.broadcast_to(q_full)
        s_fused = s_b.broadcast_to(s_full)
    q_mask = np.broadcast_to(mq[:, None, :], q_full[:3])
    s_mask = np.broadcast_to(ms[None, :, :], s_full[:3])
    return instance_match(q_fused, s_fused, matcher, q_mask, s_mask)


def episode_match_vectors(hq, mq, hs, ms, n_way, k_shot, matcher):
    """Batched instance-wise matching vectors for a whole episode.

    ``hq``: ``(R, Lq, D)`` padded query states with mask ``mq``; ``hs``:
    ``(N*K, Ls, D)`` support states ordered class-major with mask ``ms``.
    Returns ``(R, N*K, D)``.
    """
    return query_match_vectors(hq, mq, support_context(hs, ms, n_way, k_shot, matcher), matcher)
