"""Cross-modality-aware hypergraph convolution blocks.

One block: gather words into hyperedge representations, align hyperedges
with frame and clip features, exchange influence in both directions, apply
residual layer-normalized updates, and scatter hyperedges back to words.
Blocks stack without parameter sharing. Either visual stream can be
switched off (at least one must remain).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .hypergraph import SyntacticHypergraph, identity_hypergraph
from .numcore import Tensor, as_tensor, concat_rows, layer_norm, row_softmax, tanh, tensor
from .otalign import ProjectionParams, align, dot_align

OT_MODES = ("ot", "dot")
SYNTAX_MODES = ("hypergraph", "word-level")


@dataclass
class FeatureBundle:
    """Question word rows plus optional frame and clip feature rows."""

    Q: Tensor
    F: Tensor | None = None
    M: Tensor | None = None

    def __post_init__(self):
        if self.F is None and self.M is None:
            raise ValueError("need at least one visual stream")


@dataclass
class BlockParams:
    """All trainable matrices of one block; clip/frame fields may be absent.

    Suffix conventions: proj holds the shared-space maps for the cost;
    W_*x mix text into a visual stream, W_x* mix a visual stream into
    text; W_out_* project influence back to the stream's own width.
    """

    W: Tensor
    T_x: Tensor
    W_x: Tensor
    W_vx: Tensor
    W_tilde: Tensor
    ln_vx_g: Tensor
    ln_vx_b: Tensor
    ln_x_g: Tensor
    ln_x_b: Tensor
    T_f: Tensor | None = None
    W_xf: Tensor | None = None
    W_fx: Tensor | None = None
    W_f: Tensor | None = None
    W_out_f: Tensor | None = None
    ln_xf_g: Tensor | None = None
    ln_xf_b: Tensor | None = None
    ln_f_g: Tensor | None = None
    ln_f_b: Tensor | None = None
    T_m: Tensor | None = None
    W_xm: Tensor | None = None
    W_mx: Tensor | None = None
    W_m: Tensor | None = None
    W_out_m: Tensor | None = None
    ln_xm_g: Tensor | None = None
    ln_xm_b: Tensor | None = None
    ln_m_g: Tensor | None = None
    ln_m_b: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        return {f.name: t for f in fields(self) if (t := getattr(self, f.name)) is not None}

    @property
    def frame_proj(self) -> ProjectionParams:
        return ProjectionParams(T_x=self.T_x, T_f=self.T_f)

    @property
    def clip_proj(self) -> ProjectionParams:
        return ProjectionParams(T_x=self.T_x, T_f=self.T_m)


def _mat(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return tensor(rng.normal(size=(rows, cols)) / np.sqrt(rows))


def init_block_params(
    rng: np.random.Generator,
    d_w: int,
    d_v: int,
    d: int,
    use_frames: bool = True,
    use_clips: bool = True,
) -> BlockParams:
    if not (use_frames or use_clips):
        raise ValueError("need at least one visual stream")
    p = BlockParams(
        W=_mat(rng, d_w, d_w),
        T_x=_mat(rng, d_w, d),
        W_x=_mat(rng, d_w, d),
        W_vx=_mat(rng, d, d_w),
        W_tilde=_mat(rng, d_w, d_w),
        ln_vx_g=tensor(np.ones(d)),
        ln_vx_b=tensor(np.zeros(d)),
        ln_x_g=tensor(np.ones(d_w)),
        ln_x_b=tensor(np.zeros(d_w)),
    )
    if use_frames:
        p.T_f = _mat(rng, d_v, d)
        p.W_xf = _mat(rng, d_v, d)
        p.W_fx = _mat(rng, d_w, d)
        p.W_f = _mat(rng, d_v, d)
        p.W_out_f = _mat(rng, d, d_v)
        p.ln_xf_g = tensor(np.ones(d))
        p.ln_xf_b = tensor(np.zeros(d))
        p.ln_f_g = tensor(np.ones(d_v))
        p.ln_f_b = tensor(np.zeros(d_v))
    if use_clips:
        p.T_m = _mat(rng, d_v, d)
        p.W_xm = _mat(rng, d_v, d)
        p.W_mx = _mat(rng, d_w, d)
        p.W_m = _mat(rng, d_v, d)
        p.W_out_m = _mat(rng, d, d_v)
        p.ln_xm_g = tensor(np.ones(d))
        p.ln_xm_b = tensor(np.zeros(d))
        p.ln_m_g = tensor(np.ones(d_v))
        p.ln_m_b = tensor(np.zeros(d_v))
    return p


def hyperedge_repr(graph: SyntacticHypergraph, Q: Tensor, W: Tensor) -> Tensor:
    """Each hyperedge row is the mean of its member word rows, transformed."""
    if graph.n_nodes != Q.shape[0]:
        raise ValueError(
            f"graph has {graph.n_nodes} nodes but Q has {Q.shape[0]} rows"
        )
    gather = as_tensor(graph.incidence.T / graph.edge_degree[:, None])
    return gather @ Q @ W


def video_to_hyperedge(
    X: Tensor,
    F: Tensor | None,
    M: Tensor | None,
    G_xf: Tensor | None,
    G_xm: Tensor | None,
    p: BlockParams,
) -> Tensor:
    """Influence flowing from the visual streams into hyperedges."""
    total = None
    if M is not None:
        total = row_softmax(G_xm) @ M @ p.W_xm
    if F is not None:
        term = row_softmax(G_xf) @ F @ p.W_xf
        total = term if total is None else total + term
    total = total + X @ p.W_x
    return layer_norm(total, p.ln_vx_g, p.ln_vx_b)


def hyperedge_to_frame(X: Tensor, F: Tensor, G_xf: Tensor, p: BlockParams) -> Tensor:
    """Influence from hyperedges into frames; columns of G become rows."""
    return layer_norm(
        row_softmax(G_xf.T) @ X @ p.W_fx + F @ p.W_f, p.ln_xf_g, p.ln_xf_b
    )


def hyperedge_to_clip(X: Tensor, M: Tensor, G_xm: Tensor, p: BlockParams) -> Tensor:
    return layer_norm(
        row_softmax(G_xm.T) @ X @ p.W_mx + M @ p.W_m, p.ln_xm_g, p.ln_xm_b
    )


def residual_update(
    X: Tensor,
    F: Tensor | None,
    M: Tensor | None,
    infl_x: Tensor,
    infl_f: Tensor | None,
    infl_m: Tensor | None,
    p: BlockParams,
) -> tuple[Tensor, Tensor | None, Tensor | None]:
    X_new = layer_norm(infl_x @ p.W_vx + X, p.ln_x_g, p.ln_x_b)
    F_new = None if F is None else layer_norm(infl_f @ p.W_out_f + F, p.ln_f_g, p.ln_f_b)
    M_new = None if M is None else layer_norm(infl_m @ p.W_out_m + M, p.ln_m_g, p.ln_m_b)
    return X_new, F_new, M_new


def node_update(graph: SyntacticHypergraph, X: Tensor, W_tilde: Tensor) -> Tensor:
    """Each word row becomes the mean of its incident hyperedge rows."""
    scatter = as_tensor(graph.incidence / graph.node_degree[:, None])
    return scatter @ X @ W_tilde


def _alignment(X: Tensor, V: Tensor, proj: ProjectionParams, ot_mode: str,
               ot_iters: int, rescale_plan: bool) -> Tensor:
    if ot_mode == "ot":
        G = align(X, V, proj, iters=ot_iters)
        if rescale_plan:
            # undo the plan's 1/(N_s N_f) mass scale so the downstream
            # softmax sees O(1) logits instead of a near-flat row
            G = G * float(G.shape[0] * G.shape[1])
        return G
    if ot_mode == "dot":
        return dot_align(X, V, proj)
    raise ValueError(f"unknown ot_mode {ot_mode!r}")


def block_forward(
    bundle: FeatureBundle,
    graph: SyntacticHypergraph,
    p: BlockParams,
    ot_mode: str = "ot",
    syntax_mode: str = "hypergraph",
    ot_iters: int = 10,
    rescale_plan: bool = False,
) -> FeatureBundle:
    """One full block; output shapes equal input shapes."""
    if syntax_mode not in SYNTAX_MODES:
        raise ValueError(f"unknown syntax_mode {syntax_mode!r}")
    if bundle.F is not None and p.T_f is None:
        raise ValueError("bundle carries frames but block has no frame parameters")
    if bundle.M is not None and p.T_m is None:
        raise ValueError("bundle carries clips but block has no clip parameters")
    if syntax_mode == "word-level":
        graph = identity_hypergraph(graph.n_nodes)
    Q, F, M = bundle.Q, bundle.F, bundle.M
    X = hyperedge_repr(graph, Q, p.W)
    G_xf = None if F is None else _alignment(X, F, p.frame_proj, ot_mode, ot_iters, rescale_plan)
    G_xm = None if M is None else _alignment(X, M, p.clip_proj, ot_mode, ot_iters, rescale_plan)
    infl_x = video_to_hyperedge(X, F, M, G_xf, G_xm, p)
    infl_f = None if F is None else hyperedge_to_frame(X, F, G_xf, p)
    infl_m = None if M is None else hyperedge_to_clip(X, M, G_xm, p)
    X_new, F_new, M_new = residual_update(X, F, M, infl_x, infl_f, infl_m, p)
    Q_new = node_update(graph, X_new, p.W_tilde)
    return FeatureBundle(Q=Q_new, F=F_new, M=M_new)


def stack_forward(
    bundle: FeatureBundle,
    graph: SyntacticHypergraph,
    blocks: list[BlockParams],
    ot_mode: str = "ot",
    syntax_mode: str = "hypergraph",
    ot_iters: int = 10,
    rescale_plan: bool = False,
) -> FeatureBundle:
    if not blocks:
        raise ValueError("need at least one block")
    for p in blocks:
        bundle = block_forward(
            bundle, graph, p,
            ot_mode=ot_mode, syntax_mode=syntax_mode,
            ot_iters=ot_iters, rescale_plan=rescale_plan,
        )
    return bundle


@dataclass
class ContextParams:
    """Bidirectional recurrent pass over the word rows, off by default.

    Forward and backward hidden chains are combined linearly back to the
    word width, so the output can replace Q wherever raw rows would go.
    """

    W_in_f: Tensor
    U_f: Tensor
    b_f: Tensor
    W_in_b: Tensor
    U_b: Tensor
    b_b: Tensor
    W_of: Tensor
    W_ob: Tensor
    b_o: Tensor

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_context_params(rng: np.random.Generator, d_w: int, hidden: int | None = None) -> ContextParams:
    h = hidden or d_w
    return ContextParams(
        W_in_f=_mat(rng, d_w, h),
        U_f=_mat(rng, h, h),
        b_f=tensor(np.zeros((1, h))),
        W_in_b=_mat(rng, d_w, h),
        U_b=_mat(rng, h, h),
        b_b=tensor(np.zeros((1, h))),
        W_of=_mat(rng, h, d_w),
        W_ob=_mat(rng, h, d_w),
        b_o=tensor(np.zeros((1, d_w))),
    )


def context_encode(Q: Tensor, p: ContextParams) -> Tensor:
    """Sequence-aware word rows from two tanh recurrences."""
    n = Q.shape[0]
    h = p.U_f.shape[0]
    fwd: list[Tensor] = []
    state = as_tensor(np.zeros((1, h)))
    for t in range(n):
        state = tanh(Q[t : t + 1] @ p.W_in_f + state @ p.U_f + p.b_f)
        fwd.append(state)
    bwd: list[Tensor] = [None] * n
    state = as_tensor(np.zeros((1, h)))
    for t in reversed(range(n)):
        state = tanh(Q[t : t + 1] @ p.W_in_b + state @ p.U_b + p.b_b)
        bwd[t] = state
    rows = [fwd[t] @ p.W_of + bwd[t] @ p.W_ob + p.b_o for t in range(n)]
    return concat_rows(rows)
