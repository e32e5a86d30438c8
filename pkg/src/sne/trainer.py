"""Joint training of the sibling estimators.

The objective per image sequence is

    mse(source predictions) + mse(co-estimator predictions) + alpha * channel

where the channel is the distance between the source state and the
error-corrected co-estimator state, averaged over every (patch, step) pair.
Every ``reg_period``-th epoch before ``switch_epoch`` the channel is
perturbed by Gaussian noise on the source state and episodes run ``K_reg``
steps; otherwise episodes run ``K_plain`` steps on the clean channel.
Adam with polynomial learning-rate decay runs until ``switch_epoch``,
plain SGD afterwards.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from sne import numerics as nx
from sne.codec import QuantTable, baseline_decode, encode_image
from sne.errors import ParameterError, ShapeError
from sne.estimator import (SequenceData, SneConfig, decode_image, init_params, prepare_sequence,
                           run_sequence, stack_sequences)
from sne.metrics import psnr

log = logging.getLogger(__name__)

CHANNELS = ("comm", "reg_comm")
LOG_COLUMNS = ("epoch", "channel", "K", "sigma2", "lr", "mode", "train_loss", "val_psnr")


@dataclass(frozen=True)
class TrainSchedule:
    total_epochs: int = 300
    switch_epoch: int = 120
    reg_period: int = 8
    K_reg: int = 3
    K_plain: int = 2
    alpha: float = 0.1
    mu: float = 0.0
    sigma2_0: float = 0.01
    lr0: float = 2e-4
    lr_sgd: float | None = None
    decay_power: float = 0.5
    clip: float = 15.0
    batch: int = 512
    chunk: int = 8
    reg_comm_uses_err_matrix: bool = True
    K_decode: int | None = None

    def __post_init__(self):
        if not 0 < self.switch_epoch < self.total_epochs:
            raise ParameterError(f"need 0 < switch_epoch ({self.switch_epoch}) < "
                                 f"total_epochs ({self.total_epochs})")
        if self.K_reg < 1 or self.K_plain < 1 or (self.K_decode is not None and self.K_decode < 1):
            raise ParameterError("K values must be >= 1")
        if self.clip <= 0:
            raise ParameterError("clip must be positive")
        if self.reg_period < 1 or self.batch < 1 or self.chunk < 1:
            raise ParameterError("reg_period, batch and chunk must be >= 1")
        if self.sigma2_0 < 0:
            raise ParameterError("sigma2_0 must be non-negative")

    @property
    def sgd_lr(self) -> float:
        return self.lr0 / 10.0 if self.lr_sgd is None else self.lr_sgd

    @property
    def decode_K(self) -> int:
        return self.K_plain if self.K_decode is None else self.K_decode


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _channel(z_src, z_co, W_err, noise=None, use_err_matrix: bool = True):
    co = nx.matmul(z_co, nx.transpose(W_err)) if use_err_matrix else z_co
    src = z_src if noise is None else nx.add(z_src, noise)
    _check_pair(co, src)
    return nx.mean_all(nx.row_norm(nx.sub(co, src)))


def _check_pair(a, b):
    if nx.value_of(a).shape != nx.value_of(b).shape:
        raise ShapeError(f"state shapes differ: {nx.value_of(a).shape} vs {nx.value_of(b).shape}")


def comm_loss(z_src, z_co, W_err):
    """||W_err z_co - z_src||, averaged over rows when states are batched."""
    return _channel(z_src, z_co, W_err)


def reg_comm_loss(z_src, z_co, W_err, rng: nx.RngStream, mu: float, sigma2: float,
                  use_err_matrix: bool = True):
    """Channel with N(mu, sigma2) noise added to the source state (noise is a constant)."""
    noise = nx.sample_gaussian(rng, mu, sigma2, nx.value_of(z_src).shape)
    return _channel(z_src, z_co, W_err, noise, use_err_matrix)


def episode_mse(targets, predictions):
    """(1 / 2BK) * sum over steps, batch and pixels of squared error.

    ``targets`` is (B, E); ``predictions`` is a length-K sequence of (B, E).
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 2:
        raise ShapeError(f"targets must be (B, E), got {t.shape}")
    K = len(predictions)
    if K == 0:
        raise ShapeError("no predictions")
    total = None
    for p in predictions:
        if nx.value_of(p).shape != t.shape:
            raise ShapeError(f"prediction {nx.value_of(p).shape} vs target {t.shape}")
        term = nx.sum_all(nx.square(nx.sub(p, t)))
        total = term if total is None else nx.add(total, term)
    return nx.mul(total, 1.0 / (2.0 * t.shape[0] * K))


def sequence_loss(seq: SequenceData, params, config: SneConfig, K: int, alpha: float,
                  noise=None, use_err_matrix: bool = True, co_mse: bool = True):
    """Objective for one image sequence (both siblings unrolled over the whole scan).

    With B planes batched the result is the mean of their individual
    objectives. ``noise`` of shape (P*K*B, D) selects the regularized channel.
    """
    if seq.targets is None:
        raise ShapeError("training sequences need targets")
    p_src, h_src = run_sequence(seq, params, config, K, "src")
    p_co, h_co = run_sequence(seq, params, config, K, "co")
    P = seq.length

    def by_step(preds):
        return [nx.concat([preds[j][k] for j in range(P)], axis=0) for k in range(K)]

    targets = seq.targets.reshape(P * seq.batch, -1)
    loss = episode_mse(targets, by_step(p_src))
    if co_mse:
        loss = nx.add(loss, episode_mse(targets, by_step(p_co)))
    if alpha:
        z_src = nx.concat([h for j in range(P) for h in h_src[j]], axis=0)
        z_co = nx.concat([h for j in range(P) for h in h_co[j]], axis=0)
        channel = _channel(z_src, z_co, params["comm.W_err"], noise,
                           use_err_matrix or noise is None)
        loss = nx.add(loss, nx.mul(channel, alpha))
    return loss


def total_loss(batch, params, config: SneConfig, K: int, channel: str, alpha: float,
               rng: nx.RngStream | None = None, mu: float = 0.0, sigma2: float = 0.0,
               use_err_matrix: bool = True, co_mse: bool = True):
    """Mean of :func:`sequence_loss` over a batch of sequences."""
    noises = draw_noise(batch, config, K, channel, rng, mu, sigma2)
    total = None
    for seq, noise in zip(batch, noises):
        term = sequence_loss(seq, params, config, K, alpha, noise, use_err_matrix, co_mse)
        total = term if total is None else nx.add(total, term)
    return nx.mul(total, 1.0 / len(batch))


def draw_noise(batch, config: SneConfig, K: int, channel: str, rng, mu: float, sigma2: float):
    if channel not in CHANNELS:
        raise ParameterError(f"channel must be one of {CHANNELS}, got {channel!r}")
    if channel == "comm":
        return [None] * len(batch)
    if rng is None:
        raise ParameterError("the regularized channel needs an RNG stream")
    return [nx.sample_gaussian(rng, mu, sigma2, (seq.length * K * seq.batch, config.state_dim)) for seq in batch]


def sequence_gradient(seq, params, config, K, alpha, noise, use_err_matrix=True, co_mse=True):
    """Loss and gradients of one sequence on its own tape."""
    return nx.tape_gradients(
        lambda p: sequence_loss(seq, p, config, K, alpha, noise, use_err_matrix, co_mse), params)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def noise_variance(epoch: int, sigma2_0: float, switch_epoch: int) -> float:
    """Linear decay from sigma2_0 at epoch 0 to 0 at switch_epoch."""
    return sigma2_0 * max(0.0, 1.0 - epoch / switch_epoch)


def epoch_plan(epoch: int, schedule: TrainSchedule) -> tuple[str, int]:
    if (epoch + 1) % schedule.reg_period == 0 and epoch < schedule.switch_epoch:
        return "reg_comm", schedule.K_reg
    return "comm", schedule.K_plain


def optimizer_mode(epoch: int, schedule: TrainSchedule) -> str:
    return "adam" if epoch < schedule.switch_epoch else "sgd"


def learning_rate(epoch: int, schedule: TrainSchedule) -> float:
    if epoch < schedule.switch_epoch:
        return schedule.lr0 * (1.0 - epoch / schedule.switch_epoch) ** schedule.decay_power
    return schedule.sgd_lr


@dataclass
class OptimizerState:
    mode: str = "adam"
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 0.0
    transitions: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_gradients(grads: dict, clip: float) -> dict:
    return {k: np.clip(g, -clip, clip) for k, g in grads.items()}


def step(params: dict, grads: dict, opt: OptimizerState, epoch: int,
         schedule: TrainSchedule) -> dict:
    """One clipped update; Adam before ``switch_epoch``, SGD from then on."""
    for k, g in grads.items():
        if k not in params or np.shape(g) != np.shape(params[k]):
            raise ShapeError(f"gradient {k} of shape {np.shape(g)} does not match its parameter")
    mode = optimizer_mode(epoch, schedule)
    if mode != opt.mode:
        if opt.mode == "sgd":
            raise ParameterError("optimizer cannot return from sgd to adam")
        opt.mode = mode
        opt.transitions += 1
    opt.lr = learning_rate(epoch, schedule)
    grads = clip_gradients(grads, schedule.clip)
    out = dict(params)
    if mode == "sgd":
        for k, g in grads.items():
            out[k] = params[k] - opt.lr * g
        return out
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    for k, g in grads.items():
        m = b1 * opt.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * opt.v.get(k, 0.0) + (1.0 - b2) * g * g
        opt.m[k], opt.v[k] = m, v
        m_hat = m / (1.0 - b1 ** opt.t)
        v_hat = v / (1.0 - b2 ** opt.t)
        out[k] = params[k] - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

SEED_INIT, SEED_SHUFFLE, SEED_NOISE = 0, 1, 2


@dataclass
class TrainResult:
    params: dict
    config: SneConfig
    schedule: TrainSchedule
    quality: float
    log: list[dict]

    def log_text(self) -> str:
        return format_log(self.log)


def format_log(rows: list[dict]) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            str(r["epoch"]), r["channel"], str(r["K"]), f"{r['sigma2']:.10g}", f"{r['lr']:.10g}",
            r["mode"], f"{r['train_loss']:.12g}",
            "nan" if r["val_psnr"] is None else f"{r['val_psnr']:.6f}",
        ]))
    return "\n".join(lines) + "\n"


def dihedral_variants(img) -> list[np.ndarray]:
    """The eight rotations/reflections of a square image (non-square: the four flips)."""
    a = np.asarray(img, dtype=np.float64)
    out = []
    for flip in (False, True):
        base = a[:, ::-1] if flip else a
        for r in range(4):
            v = np.rot90(base, r)
            if v.shape == a.shape:
                out.append(np.ascontiguousarray(v))
    return out


def build_sequences(images, config: SneConfig, quality: float, with_targets: bool = True):
    table = QuantTable.standard(config.block_edge, quality)
    seqs, reps = [], []
    for img in images:
        rep = encode_image(img, table, config.mode)
        reps.append(rep)
        for ch in range(rep.channels):
            seqs.append(prepare_sequence(rep, config, ch, img if with_targets else None))
    return seqs, reps


def make_chunks(batch: list[SequenceData], chunk: int) -> list[SequenceData]:
    """Group a batch into stacked chunks of at most ``chunk`` same-grid planes, order kept."""
    groups: dict[tuple, list] = {}
    for seq in batch:
        groups.setdefault(seq.grid_shape, []).append(seq)
    out = []
    for members in groups.values():
        for i in range(0, len(members), chunk):
            out.append(stack_sequences(members[i:i + chunk]))
    return out


def train(images, schedule: TrainSchedule, config: SneConfig, seed: int, quality: float = 1.0,
          val_images=None, workers: int = 1, augment: bool = False,
          epoch_callback=None) -> TrainResult:
    """Train both siblings on ``images`` (float arrays in [0, 1]).

    Each batch of ``schedule.batch`` planes is split into stacked chunks of
    ``schedule.chunk`` planes, one tape per chunk. ``workers`` > 1 runs the
    chunks in a thread pool; gradients are always combined in chunk order,
    so the worker count never changes the result.
    """
    if not images:
        raise ParameterError("empty training corpus")
    if augment:
        images = [v for img in images for v in dihedral_variants(img)]
    seqs, _ = build_sequences(images, config, quality)
    val_reps = []
    if val_images:
        _, val_reps = build_sequences(val_images, config, quality, with_targets=False)
    params = init_params(config, nx.RngStream(seed, SEED_INIT))
    shuffle_rng = nx.RngStream(seed, SEED_SHUFFLE)
    noise_rng = nx.RngStream(seed, SEED_NOISE)
    opt = OptimizerState()
    rows = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for epoch in range(schedule.total_epochs):
            channel, K = epoch_plan(epoch, schedule)
            sigma2 = noise_variance(epoch, schedule.sigma2_0, schedule.switch_epoch)
            order = shuffle_rng.permutation(len(seqs))
            batch_losses = []
            for start in range(0, len(order), schedule.batch):
                members = [seqs[i] for i in order[start:start + schedule.batch]]
                chunks = make_chunks(members, schedule.chunk)
                noises = draw_noise(chunks, config, K, channel, noise_rng, schedule.mu, sigma2)
                jobs = [(c, params, config, K, schedule.alpha, n, schedule.reg_comm_uses_err_matrix)
                        for c, n in zip(chunks, noises)]
                if pool is None:
                    results = [sequence_gradient(*j) for j in jobs]
                else:
                    results = list(pool.map(lambda j: sequence_gradient(*j), jobs))
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                loss = 0.0
                for c, (chunk_loss, chunk_grads) in zip(chunks, results):
                    weight = c.batch / len(members)
                    loss += weight * chunk_loss
                    for k, g in chunk_grads.items():
                        grads[k] += weight * g
                batch_losses.append(loss)
                params = step(params, grads, opt, epoch, schedule)
            val = None
            if val_reps:
                val = float(np.mean([
                    psnr(decode_image(rep, params, config, schedule.decode_K), img)
                    for rep, img in zip(val_reps, val_images)]))
            row = {"epoch": epoch, "channel": channel, "K": K, "sigma2": sigma2, "lr": opt.lr,
                   "mode": opt.mode, "train_loss": float(np.mean(batch_losses)), "val_psnr": val}
            rows.append(row)
            log.debug("epoch %d %s", epoch, row)
            if epoch_callback is not None:
                epoch_callback(row, params)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, config, schedule, quality, rows)


def schedule_to_dict(schedule: TrainSchedule) -> dict[str, str]:
    return {k: ("" if v is None else str(int(v)) if isinstance(v, bool) else repr(v))
            for k, v in asdict(schedule).items()}


def baseline_psnr(images, config: SneConfig, quality: float) -> list[float]:
    table = QuantTable.standard(config.block_edge, quality)
    return [psnr(baseline_decode(encode_image(img, table, config.mode)), img) for img in images]
