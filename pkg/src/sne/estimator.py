"""Sibling recurrent estimators: context transform, state update, decoder head, episodes.

Row-vector convention throughout: a batch of B inputs is a (B, features)
matrix and weights map ``x @ W``. The communication matrix is stored in
column form (``W_err @ z``) and applied as ``z @ W_err.T``.

Both siblings see the target's own quantized block (``feed_target``) and,
with ``residual`` on, predict a correction on top of its plain dequantized
reconstruction. Their spatial contexts are the disjoint near/far offset sets
of :class:`~sne.patching.ContextSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from sne import numerics as nx
from sne.codec import SAMPLE_SCALE, QuantizedRepresentation, assemble_blocks, dct_inverse
from sne.errors import CheckpointError, ParameterError, ShapeError
from sne.patching import ContextSpec, build_grid, gather_blocks, scan_order

SIBLINGS = ("src", "co")
CELLS = ("lstm", "elman")


class SkipMode(str, Enum):
    NONE = "none"
    SKIP_F = "skipf"  # co-estimator only
    SKIP_B = "skipb"  # source only
    SKIP_BOTH = "skipboth"

    def gates(self, which: str) -> bool:
        if self is SkipMode.SKIP_BOTH:
            return True
        if self is SkipMode.SKIP_F:
            return which == "co"
        if self is SkipMode.SKIP_B:
            return which == "src"
        return False


@dataclass(frozen=True)
class SneConfig:
    block_edge: int = 8
    state_dim: int = 32
    cell: str = "lstm"
    skip: SkipMode = SkipMode.NONE
    tied: bool = True
    context: ContextSpec = field(default_factory=ContextSpec)
    feed_target: bool = True
    residual: bool = True
    mode: str = "aligned"
    st_surrogate: float = 1.0
    init_scale: float = 0.05

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ParameterError(f"cell must be one of {CELLS}, got {self.cell!r}")
        object.__setattr__(self, "skip", SkipMode(self.skip))
        if self.block_edge < 1 or self.state_dim < 1:
            raise ParameterError("block_edge and state_dim must be positive")

    @property
    def patch_dim(self) -> int:
        return self.block_edge * self.block_edge

    def to_dict(self) -> dict[str, str]:
        return {
            "block_edge": str(self.block_edge),
            "state_dim": str(self.state_dim),
            "cell": self.cell,
            "skip": self.skip.value,
            "tied": str(int(self.tied)),
            "source_offsets": self.context.to_text(self.context.source_offsets),
            "co_offsets": self.context.to_text(self.context.co_offsets),
            "feed_target": str(int(self.feed_target)),
            "residual": str(int(self.residual)),
            "mode": self.mode,
            "st_surrogate": repr(self.st_surrogate),
            "init_scale": repr(self.init_scale),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "SneConfig":
        base = cls()
        ctx = ContextSpec(
            ContextSpec.parse_offsets(d["source_offsets"]) if "source_offsets" in d
            else base.context.source_offsets,
            ContextSpec.parse_offsets(d["co_offsets"]) if "co_offsets" in d
            else base.context.co_offsets,
        )
        return cls(
            block_edge=int(d.get("block_edge", base.block_edge)),
            state_dim=int(d.get("state_dim", base.state_dim)),
            cell=d.get("cell", base.cell),
            skip=SkipMode(d.get("skip", base.skip.value)),
            tied=_flag(d.get("tied", "1")),
            context=ctx,
            feed_target=_flag(d.get("feed_target", "1")),
            residual=_flag(d.get("residual", "1")),
            mode=d.get("mode", base.mode),
            st_surrogate=float(d.get("st_surrogate", base.st_surrogate)),
            init_scale=float(d.get("init_scale", base.init_scale)),
        )


def _flag(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"not a boolean flag: {text!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def tensor_shapes(config: SneConfig) -> dict[str, tuple[int, int]]:
    E, D, N = config.patch_dim, config.state_dim, config.context.n
    shapes: dict[str, tuple[int, int]] = {}
    for w in SIBLINGS:
        if config.tied:
            shapes[f"{w}.W_ctx"] = (E, D)
        else:
            for n in range(N):
                shapes[f"{w}.W_ctx.{n}"] = (E, D)
        if config.feed_target:
            shapes[f"{w}.W_self"] = (E, D)
        if config.cell == "lstm":
            shapes[f"{w}.lstm.W"] = (2 * D, 4 * D)
            shapes[f"{w}.lstm.b"] = (1, 4 * D)
        else:
            shapes[f"{w}.elman.U"] = (D, D)
            shapes[f"{w}.elman.V"] = (D, D)
        if config.skip.gates(w):
            shapes[f"{w}.skip.Wp"] = (D, 1)
            shapes[f"{w}.skip.bp"] = (1, 1)
    shapes["dec.U"] = (D, E)
    shapes["dec.c"] = (1, E)
    shapes["comm.W_err"] = (D, D)
    return shapes


def is_co_tensor(name: str) -> bool:
    """Tensors used only in training: the co-estimator and the channel matrix."""
    return name.startswith("co.") or name == "comm.W_err"


def init_params(config: SneConfig, rng: nx.RngStream) -> dict[str, np.ndarray]:
    s = config.init_scale
    return {name: rng.uniform(-s, s, shape) for name, shape in tensor_shapes(config).items()}


def strip_co_tensors(params: dict) -> dict:
    return {k: v for k, v in params.items() if not is_co_tensor(k)}


def check_source_tensors(params: dict, config: SneConfig) -> None:
    needed = [k for k in tensor_shapes(config) if not is_co_tensor(k)]
    missing = [k for k in needed if k not in params]
    if missing:
        raise CheckpointError(f"checkpoint lacks source-estimator tensors: {', '.join(missing)}")
    for k in needed:
        if np.shape(params[k]) != tensor_shapes(config)[k]:
            raise CheckpointError(f"tensor {k} has shape {np.shape(params[k])}, "
                                  f"expected {tensor_shapes(config)[k]}")


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def coeff_features(blocks: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Dequantized coefficients flattened and scaled into [-1, 1]."""
    e = table.shape[0]
    deq = np.asarray(blocks, dtype=np.float64) * table
    return (deq / (SAMPLE_SCALE * e)).reshape(*deq.shape[:-2], e * e)


def anchor_pixels(blocks: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Plain dequantize-and-invert reconstruction of each block, flattened, in [0, 1]."""
    e = table.shape[0]
    pix = dct_inverse(np.asarray(blocks, dtype=np.float64) * table) / SAMPLE_SCALE
    return np.clip(pix, 0.0, 1.0).reshape(*pix.shape[:-2], e * e)


@dataclass
class SequenceData:
    """Per-patch inputs of one or more same-shaped image planes, in scan order.

    Shapes: src_ctx / co_ctx (P, B, N, E); target_code, anchor, targets (P, B, E)
    where B counts planes processed side by side.
    """

    src_ctx: np.ndarray
    co_ctx: np.ndarray
    target_code: np.ndarray
    anchor: np.ndarray
    scan: np.ndarray
    grid_shape: tuple[int, int]
    targets: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.scan)

    @property
    def batch(self) -> int:
        return self.anchor.shape[1]


def prepare_sequence(rep: QuantizedRepresentation, config: SneConfig, channel: int = 0,
                     image=None) -> SequenceData:
    if rep.block_edge != config.block_edge:
        raise ShapeError(f"representation block edge {rep.block_edge} vs model {config.block_edge}")
    rows, cols = rep.grid_shape
    scan = scan_order(rows, cols)
    table = rep.table.entries
    src, _ = gather_blocks(rep, scan, config.context.source_offsets, channel)
    co, _ = gather_blocks(rep, scan, config.context.co_offsets, channel)
    own, _ = gather_blocks(rep, scan, [(0, 0)], channel)
    targets = None
    if image is not None:
        grid = build_grid(image, rep.block_edge, rep.mode, channel)
        if (grid.grid_rows, grid.grid_cols) != (rows, cols):
            raise ShapeError("image grid does not match the representation grid")
        targets = grid.targets_in_scan()[:, None]
    return SequenceData(coeff_features(src, table)[:, None], coeff_features(co, table)[:, None],
                        coeff_features(own, table), anchor_pixels(own, table),
                        scan, (rows, cols), targets)


def stack_sequences(seqs: list[SequenceData]) -> SequenceData:
    """Join planes with identical grids along the batch axis."""
    first = seqs[0]
    for s in seqs[1:]:
        if s.grid_shape != first.grid_shape:
            raise ShapeError(f"cannot batch grids {first.grid_shape} and {s.grid_shape}")
    has_targets = all(s.targets is not None for s in seqs)
    return SequenceData(
        np.concatenate([s.src_ctx for s in seqs], axis=1),
        np.concatenate([s.co_ctx for s in seqs], axis=1),
        np.concatenate([s.target_code for s in seqs], axis=1),
        np.concatenate([s.anchor for s in seqs], axis=1),
        first.scan, first.grid_shape,
        np.concatenate([s.targets for s in seqs], axis=1) if has_targets else None,
    )


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------


def transform_context(ctx, params, which: str, config: SneConfig, target_code=None):
    """e = W_1 q_1 + ... + W_N q_N (+ W_self q_target); identity output map.

    ``ctx`` is (B, N, E) or (N, E) of scaled coefficients.
    """
    q = np.asarray(ctx, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    if q.ndim != 3 or q.shape[1] != config.context.n or q.shape[2] != config.patch_dim:
        raise ShapeError(f"expected context of {config.context.n} blocks of "
                         f"{config.patch_dim} values, got shape {np.shape(ctx)}")
    if config.tied:
        e = nx.matmul(q.sum(axis=1), params[f"{which}.W_ctx"])
    else:
        e = nx.matmul(q[:, 0], params[f"{which}.W_ctx.0"])
        for n in range(1, q.shape[1]):
            e = nx.add(e, nx.matmul(q[:, n], params[f"{which}.W_ctx.{n}"]))
    if config.feed_target:
        if target_code is None:
            raise ShapeError("model feeds the target code but none was given")
        code = np.asarray(target_code, dtype=np.float64).reshape(q.shape[0], -1)
        e = nx.add(e, nx.matmul(code, params[f"{which}.W_self"]))
    return nx.activation(e, "identity")


@dataclass
class SiblingState:
    h: object
    c: object | None
    u_hat: object


@dataclass
class EpisodeState:
    src: SiblingState
    co: SiblingState | None = None
    k: int = 0


def initial_sibling(config: SneConfig, batch: int = 1) -> SiblingState:
    D = config.state_dim
    c = np.zeros((batch, D)) if config.cell == "lstm" else None
    return SiblingState(np.zeros((batch, D)), c, np.ones((batch, 1)))


def initial_state(config: SneConfig, batch: int = 1, with_co: bool = True) -> EpisodeState:
    return EpisodeState(initial_sibling(config, batch),
                        initial_sibling(config, batch) if with_co else None, 0)


def _candidate(e, prev: SiblingState, params, which: str, config: SneConfig):
    D = config.state_dim
    if config.cell == "elman":
        pre = nx.add(nx.matmul(e, params[f"{which}.elman.U"]),
                     nx.matmul(prev.h, params[f"{which}.elman.V"]))
        return nx.tanh(pre), None
    gates = nx.add(nx.matmul(nx.concat([e, prev.h], axis=1), params[f"{which}.lstm.W"]),
                   params[f"{which}.lstm.b"])
    i = nx.sigmoid(gates[:, 0:D])
    f = nx.sigmoid(gates[:, D:2 * D])
    o = nx.sigmoid(gates[:, 2 * D:3 * D])
    g = nx.tanh(gates[:, 3 * D:4 * D])
    c = nx.add(nx.mul(f, prev.c), nx.mul(i, g))
    return nx.mul(o, nx.tanh(c)), c


def state_step(e, prev: SiblingState, params, which: str, config: SneConfig) -> SiblingState:
    """One recurrent update; skip-gated when ``config.skip`` covers ``which``."""
    if nx.value_of(e).shape[1] != config.state_dim:
        raise ShapeError(f"input of width {nx.value_of(e).shape[1]} vs state dim {config.state_dim}")
    h, c = _candidate(e, prev, params, which, config)
    if not config.skip.gates(which):
        return SiblingState(h, c, prev.u_hat)
    u = nx.binarize(prev.u_hat, config.st_surrogate)
    keep = nx.sub(1.0, u)
    h = nx.add(nx.mul(u, h), nx.mul(keep, prev.h))
    if c is not None:
        c = nx.add(nx.mul(u, c), nx.mul(keep, prev.c))
    delta = nx.sigmoid(nx.add(nx.matmul(h, params[f"{which}.skip.Wp"]), params[f"{which}.skip.bp"]))
    return SiblingState(h, c, update_accumulator(u, prev.u_hat, delta))


def update_accumulator(u, u_hat, delta):
    """Next skip accumulator: reset to ``delta`` after an update (u=1),
    otherwise grow by ``delta`` without passing 1 (u=0)."""
    grown = nx.add(u_hat, nx.minimum(delta, nx.sub(1.0, u_hat)))
    return nx.add(nx.mul(u, delta), nx.mul(nx.sub(1.0, u), grown))


def decode_head(h, params, anchor=None):
    """p = U s + c (identity output map), plus the anchor reconstruction if given."""
    out = nx.add(nx.matmul(h, params["dec.U"]), params["dec.c"])
    if anchor is not None:
        out = nx.add(out, anchor)
    return out


class StepCounter:
    def __init__(self):
        self.steps = 0


def sibling_episode(e, carry: SiblingState, K: int, params, which: str, config: SneConfig,
                    anchor=None, counter: StepCounter | None = None):
    """K refinement steps from ``carry`` with ``e`` re-fed at every step.

    Returns (predictions, hidden states, final state), one entry per step.
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    preds, hiddens = [], []
    state = carry
    for _ in range(K):
        state = state_step(e, state, params, which, config)
        if counter is not None:
            counter.steps += 1
        preds.append(decode_head(state.h, params, anchor if config.residual else None))
        hiddens.append(state.h)
    return preds, hiddens, state


def run_episode(src_ctx, co_ctx, carry_in: EpisodeState, K: int, params, config: SneConfig,
                train: bool = True, target_code=None, anchor=None,
                counter: StepCounter | None = None):
    """One K-step episode for a single target.

    Returns ``(predictions, carry_out)`` where ``predictions`` maps
    ``"src"`` (and ``"co"`` when training) to K patch predictions.
    With ``train=False`` the co-estimator is not touched at all.
    """
    e_src = transform_context(src_ctx, params, "src", config, target_code)
    p_src, _, s_src = sibling_episode(e_src, carry_in.src, K, params, "src", config, anchor, counter)
    predictions = {"src": p_src}
    s_co = carry_in.co
    if train:
        if co_ctx is None or carry_in.co is None:
            raise ParameterError("training episodes need co-estimator context and carry")
        e_co = transform_context(co_ctx, params, "co", config, target_code)
        predictions["co"], _, s_co = sibling_episode(e_co, carry_in.co, K, params, "co", config,
                                                     anchor, counter)
    return predictions, EpisodeState(s_src, s_co, carry_in.k + K)


def run_sequence(seq: SequenceData, params, config: SneConfig, K: int, which: str = "src",
                 counter: StepCounter | None = None):
    """Episodes over every patch with state carried along the scan.

    The source walks the scan front to back; the co-estimator walks it back
    to front. Results are indexed by scan position either way:
    ``preds[j]`` and ``hiddens[j]`` hold K entries for patch ``j``.
    """
    ctx = seq.src_ctx if which == "src" else seq.co_ctx
    P, B = seq.length, seq.batch
    # every patch's context in one batched transform, sliced per episode below
    code = seq.target_code.reshape(P * B, -1) if config.feed_target else None
    e_all = transform_context(ctx.reshape(P * B, *ctx.shape[2:]), params, which, config, code)
    order = range(P) if which == "src" else range(P - 1, -1, -1)
    preds: list = [None] * P
    hiddens: list = [None] * P
    state = initial_sibling(config, B)
    for j in order:
        e = e_all[j * B:(j + 1) * B]
        preds[j], hiddens[j], state = sibling_episode(e, state, K, params, which, config,
                                                      seq.anchor[j], counter)
    return preds, hiddens


def decode_plane(seq: SequenceData, params, config: SneConfig, K: int,
                 counter: StepCounter | None = None) -> np.ndarray:
    """Final-step source predictions for every patch, in scan order (P, B, E)."""
    preds, _ = run_sequence(seq, params, config, K, "src", counter)
    return np.stack([p[-1] for p in preds])


def decode_image(rep: QuantizedRepresentation, params, config: SneConfig, K: int,
                 counter: StepCounter | None = None) -> np.ndarray:
    """Source-estimator-only decode, clamped to [0, 1].

    Never reads co-estimator tensors, so stripping them from a checkpoint
    cannot change the output.
    """
    check_source_tensors(params, config)
    if rep.mode != config.mode:
        config = replace(config, mode=rep.mode)
    planes = []
    for ch in range(rep.channels):
        seq = prepare_sequence(rep, config, ch)
        patches = decode_plane(seq, params, config, K, counter)[:, 0]
        planes.append(_assemble(patches, seq, rep))
    out = np.clip(np.stack(planes, axis=-1), 0.0, 1.0)
    return out[:, :, 0] if rep.channels == 1 else out


def _assemble(patches_in_scan: np.ndarray, seq: SequenceData, rep: QuantizedRepresentation):
    e = rep.block_edge
    rows, cols = seq.grid_shape
    raster = np.empty((rows * cols, e * e))
    raster[seq.scan] = patches_in_scan
    return assemble_blocks(raster.reshape(rows, cols, e, e), rep.height, rep.width, rep.mode)
