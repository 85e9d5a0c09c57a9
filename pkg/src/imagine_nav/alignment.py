"""Perceptual alignment filter.

A shared per-cell tanh encoder embeds the observation panorama, the imagined
grid and the inpainted grid. Observation cells query the concatenated imagined
cells through multi-head scaled dot-product attention; a linear head and a
sigmoid turn each fused vector into a relevance score in [0, 1].

Identical input rows produce identical encodings, so the forward pass runs on
unique query rows and on unique key rows weighted by their multiplicity (a
``log(count)`` shift inside the softmax). The result is exactly the full
cell-by-cell computation, but an order of magnitude cheaper on rendered grids,
where entity regions are constant.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .environment import Panorama, World, entity_regions, render_observation
from .errors import ConfigurationError, ContractError, GenerationError
from .imagination import (
    InstructionState,
    imagine_dynamic,
    imagine_static,
)

log = logging.getLogger(__name__)

PARAMS_MAGIC = b"VPAF"
PARAMS_VERSION = 1
BCE_CLAMP = 1e-7
DICE_EPS = 1.0


@dataclass
class PafParams:
    enc_w: np.ndarray  # (C, D)
    enc_b: np.ndarray  # (D,)
    wq: np.ndarray  # (heads, D, D/heads)
    wk: np.ndarray
    wv: np.ndarray
    out_w: np.ndarray  # (D,)
    out_b: np.ndarray  # ()

    @property
    def channels(self) -> int:
        return self.enc_w.shape[0]

    @property
    def dim(self) -> int:
        return self.enc_w.shape[1]

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]

    @property
    def dtype(self):
        return self.enc_w.dtype

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def map(self, fn) -> "PafParams":
        return PafParams(*[fn(a) for a in self.arrays()])

    def astype(self, dtype) -> "PafParams":
        return self.map(lambda a: np.asarray(a, dtype=dtype).copy())

    def copy(self) -> "PafParams":
        return self.map(np.copy)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# Glorot gains for the encoder and the query/key maps. Semantic cells are sparse
# and unit-norm, so unit-gain encodings start near tanh's linear region and the
# attention logits start almost flat; training then idles on a long plateau.
ENC_GAIN = 3.0
QK_GAIN = 2.0


def init_params(channels: int, dim: int = 16, n_heads: int = 2, seed: int = 0, dtype=np.float32,
                prior: float | None = None) -> PafParams:
    """Random parameters. ``prior`` (positive-cell rate) sets the output bias to its log-odds."""
    if dim % n_heads:
        raise ConfigurationError(f"dim {dim} is not divisible by {n_heads} heads")
    rng = np.random.default_rng([seed, 0xAF])
    dh = dim // n_heads

    def glorot(*shape, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    if prior is not None and not 0.0 < prior < 1.0:
        raise ConfigurationError(f"prior must lie in (0, 1), got {prior}")
    return PafParams(
        enc_w=ENC_GAIN * glorot(channels, dim, fan_in=channels, fan_out=dim),
        enc_b=np.zeros(dim),
        wq=QK_GAIN * glorot(n_heads, dim, dh, fan_in=dim, fan_out=dh),
        wk=QK_GAIN * glorot(n_heads, dim, dh, fan_in=dim, fan_out=dh),
        wv=glorot(n_heads, dim, dh, fan_in=dim, fan_out=dh),
        out_w=glorot(dim, fan_in=dim, fan_out=1),
        out_b=np.array(0.0 if prior is None else math.log(prior / (1.0 - prior))),
    ).astype(dtype)


# --------------------------------------------------------------------------- forward

def encode(params: PafParams, grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=params.dtype)
    if grid.shape[-1] != params.channels:
        raise ContractError(f"grid has {grid.shape[-1]} channels, encoder expects {params.channels}")
    return np.tanh(grid @ params.enc_w + params.enc_b)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class _Cache:
    shape: tuple[int, int]
    inv_q: np.ndarray
    xq: np.ndarray
    xk: np.ndarray
    hq: np.ndarray
    hk: np.ndarray
    q: list
    k: list
    v: list
    p: list
    z: np.ndarray
    a_unique: np.ndarray


def _check_inputs(params: PafParams, obs, imagined, inpainted):
    obs, imagined, inpainted = (np.asarray(g, dtype=params.dtype) for g in (obs, imagined, inpainted))
    for name, g in (("observation", obs), ("imagined", imagined), ("inpainted", inpainted)):
        if g.ndim != 3 or g.shape[-1] != params.channels:
            raise ContractError(f"{name} grid must be H x W x {params.channels}, got {g.shape}")
    if imagined.shape != inpainted.shape or obs.shape[0] != imagined.shape[0]:
        raise ContractError(
            f"inconsistent shapes: obs {obs.shape}, imagined {imagined.shape}, inpainted {inpainted.shape}"
        )
    return obs, imagined, inpainted


@dataclass(frozen=True)
class _Unique:
    """Distinct query and key cells of one input triple; depends on inputs only."""
    shape: tuple[int, int]
    xq: np.ndarray
    inv_q: np.ndarray
    xk: np.ndarray
    log_counts: np.ndarray


def _unique_cells(params: PafParams, obs, imagined, inpainted) -> _Unique:
    obs, imagined, inpainted = _check_inputs(params, obs, imagined, inpainted)
    c = params.channels
    xq, inv_q = np.unique(obs.reshape(-1, c), axis=0, return_inverse=True)
    keys = np.concatenate([imagined.reshape(-1, c), inpainted.reshape(-1, c)])
    xk, counts = np.unique(keys, axis=0, return_counts=True)
    return _Unique(obs.shape[:2], xq, inv_q.reshape(-1), xk, np.log(counts).astype(params.dtype))


def _forward(params: PafParams, obs, imagined, inpainted, cells: _Unique | None = None) -> _Cache:
    if cells is None:
        cells = _unique_cells(params, obs, imagined, inpainted)
    xq, xk, log_counts = cells.xq, cells.xk, cells.log_counts
    hq = np.tanh(xq @ params.enc_w + params.enc_b)
    hk = np.tanh(xk @ params.enc_w + params.enc_b)
    scale = 1.0 / math.sqrt(params.head_dim)
    qs, ks, vs, ps, zs = [], [], [], [], []
    for h in range(params.n_heads):
        q = hq @ params.wq[h]
        k = hk @ params.wk[h]
        v = hk @ params.wv[h]
        p = _softmax_rows((q @ k.T) * scale + log_counts)
        qs.append(q), ks.append(k), vs.append(v), ps.append(p)
        zs.append(p @ v)
    z = np.concatenate(zs, axis=1)
    a_unique = _sigmoid(z @ params.out_w + params.out_b)
    return _Cache(cells.shape, cells.inv_q, xq, xk, hq, hk, qs, ks, vs, ps, z, a_unique)


def fuse_and_decode(params: PafParams, obs, imagined, inpainted) -> np.ndarray:
    """Attention map over the observation cells, values in [0, 1]."""
    cache = _forward(params, obs, imagined, inpainted)
    return cache.a_unique[cache.inv_q].reshape(cache.shape)


def fuse_and_decode_naive(params: PafParams, obs, imagined, inpainted) -> np.ndarray:
    """Cell-by-cell reference without de-duplication; used to cross-check the fast path."""
    obs, imagined, inpainted = _check_inputs(params, obs, imagined, inpainted)
    c = params.channels
    hq = encode(params, obs.reshape(-1, c))
    hk = encode(params, np.concatenate([imagined.reshape(-1, c), inpainted.reshape(-1, c)]))
    scale = 1.0 / math.sqrt(params.head_dim)
    heads = []
    for h in range(params.n_heads):
        p = _softmax_rows((hq @ params.wq[h]) @ (hk @ params.wk[h]).T * scale)
        heads.append(p @ (hk @ params.wv[h]))
    logits = np.concatenate(heads, axis=1) @ params.out_w + params.out_b
    return _sigmoid(logits).reshape(obs.shape[:2])


# --------------------------------------------------------------------------- loss

@dataclass(frozen=True)
class LossValue:
    bce: float
    dice: float
    total: float


def loss(pred: np.ndarray, gt: np.ndarray) -> LossValue:
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = float(np.mean(-(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p))))
    dice = 1.0 - (2.0 * np.sum(pred * gt) + DICE_EPS) / (np.sum(pred) + np.sum(gt) + DICE_EPS)
    return LossValue(bce, float(dice), bce + float(dice))


def _loss_grad_logits(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """d(bce + dice)/d(logit) per cell for a sigmoid output ``pred``."""
    n = pred.size
    inside = (pred > BCE_CLAMP) & (pred < 1.0 - BCE_CLAMP)
    d_bce = np.where(inside, (pred - gt) / n, 0.0)
    s = pred.sum() + gt.sum() + DICE_EPS
    inter = 2.0 * np.sum(pred * gt) + DICE_EPS
    d_dice_dp = -(2.0 * gt * s - inter) / (s * s)
    return d_bce + d_dice_dp * pred * (1.0 - pred)


def dice_coefficient(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Hard overlap 2|P & G| / (|P| + |G|) of the thresholded map; 1.0 when both are empty."""
    p = np.asarray(pred) > threshold
    g = np.asarray(gt, bool)
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else float(2.0 * np.sum(p & g) / denom)


# --------------------------------------------------------------------------- backward

@dataclass
class Quadruple:
    obs: np.ndarray  # H x (W*K) x C
    imagined: np.ndarray  # H x W x C
    inpainted: np.ndarray
    gt_mask: np.ndarray  # H x (W*K) bool


def _backward_from_cache(params: PafParams, cache: _Cache, dlogit_cells: np.ndarray) -> PafParams:
    nq = len(cache.xq)
    dlogit = np.bincount(cache.inv_q, weights=dlogit_cells.reshape(-1), minlength=nq).astype(params.dtype)
    d_out_w = cache.z.T @ dlogit
    d_out_b = np.asarray(dlogit.sum(), dtype=params.dtype)
    dz = np.outer(dlogit, params.out_w)
    dh_ = params.head_dim
    scale = 1.0 / math.sqrt(dh_)
    dhq = np.zeros_like(cache.hq)
    dhk = np.zeros_like(cache.hk)
    dwq, dwk, dwv = (np.zeros_like(params.wq) for _ in range(3))
    for h in range(params.n_heads):
        dzh = dz[:, h * dh_ : (h + 1) * dh_]
        p, q, k, v = cache.p[h], cache.q[h], cache.k[h], cache.v[h]
        dv = p.T @ dzh
        dp = dzh @ v.T
        ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.T @ q) * scale
        dwq[h] = cache.hq.T @ dq
        dwk[h] = cache.hk.T @ dk
        dwv[h] = cache.hk.T @ dv
        dhq += dq @ params.wq[h].T
        dhk += dk @ params.wk[h].T + dv @ params.wv[h].T
    dpre_q = dhq * (1.0 - cache.hq**2)
    dpre_k = dhk * (1.0 - cache.hk**2)
    return PafParams(
        enc_w=cache.xq.T @ dpre_q + cache.xk.T @ dpre_k,
        enc_b=dpre_q.sum(axis=0) + dpre_k.sum(axis=0),
        wq=dwq,
        wk=dwk,
        wv=dwv,
        out_w=d_out_w,
        out_b=d_out_b,
    )


def loss_and_grad(params: PafParams, quad: Quadruple,
                  cells: _Unique | None = None) -> tuple[LossValue, PafParams, np.ndarray]:
    cache = _forward(params, quad.obs, quad.imagined, quad.inpainted, cells)
    pred = cache.a_unique[cache.inv_q].reshape(cache.shape)
    gt = np.asarray(quad.gt_mask, dtype=params.dtype)
    if gt.shape != pred.shape:
        raise ContractError(f"mask shape {gt.shape} does not match observation {pred.shape}")
    grads = _backward_from_cache(params, cache, _loss_grad_logits(pred, gt))
    return loss(pred, gt), grads, pred


def backward(params: PafParams, quad: Quadruple) -> PafParams:
    """Exact gradients of bce + dice with respect to every parameter."""
    return loss_and_grad(params, quad)[1]


def total_loss(params: PafParams, quad: Quadruple) -> float:
    return loss(fuse_and_decode(params, quad.obs, quad.imagined, quad.inpainted), quad.gt_mask).total


def finite_difference_grads(params: PafParams, quad: Quadruple, h: float = 1e-4) -> PafParams:
    """Central differences in float64, one coordinate at a time."""
    base = params.astype(np.float64)
    quad64 = Quadruple(*(np.asarray(a, np.float64) if a.dtype != bool else a for a in
                         (quad.obs, quad.imagined, quad.inpainted, quad.gt_mask)))
    out = base.map(np.zeros_like)
    for name in PafParams.names():
        arr = getattr(base, name)
        g = getattr(out, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = total_loss(base, quad64)
            arr[idx] = old - h
            down = total_loss(base, quad64)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
    return out


def max_relative_error(a: PafParams, b: PafParams, floor: float = 1e-8) -> float:
    worst = 0.0
    for x, y in zip(a.arrays(), b.arrays()):
        x, y = np.asarray(x, float), np.asarray(y, float)
        rel = np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst


# --------------------------------------------------------------------------- data

def goal_mask(pano: Panorama, goal: int, height: int, width: int) -> np.ndarray:
    """Cells of the panorama covered by a rendered region of ``goal``."""
    mask = np.zeros((height, width * pano.k), bool)
    for t, ents in enumerate(pano.entities):
        for e, (rows, cols) in zip(ents, entity_regions(height, width, len(ents))):
            if e == goal:
                mask[rows, t * width + cols.start : t * width + cols.stop] = True
    return mask


def make_quadruple(world: World, viewpoint: int, goal: int, render_seed: int, dynamic: bool,
                   mask_salient: bool = True) -> Quadruple:
    pano = render_observation(world, viewpoint, render_seed)
    instr = InstructionState((goal,))
    if dynamic:
        hyp = imagine_dynamic(pano, [viewpoint], instr, world.params, viewpoint, mask_salient)
    else:
        hyp = imagine_static(instr, world.params, pano, mask_salient)
    p = world.params
    return Quadruple(pano.grid, hyp.imagined, hyp.inpainted, goal_mask(pano, goal, p.height, p.width))


def generate_quadruples(worlds: Sequence[World], n: int, seed: int, mask_salient: bool = True) -> list[Quadruple]:
    if n < 1:
        raise ConfigurationError("need at least one quadruple")
    if not worlds:
        raise ConfigurationError("need at least one world")
    rng = np.random.default_rng([seed, 0xDA7A])
    out = []
    for i in range(n):
        world = worlds[int(rng.integers(len(worlds)))]
        v = int(rng.integers(world.graph.n))
        present = sorted(world.entities_at(v))
        if not present:
            raise GenerationError(f"viewpoint {v} shows no entities")
        goal = present[int(rng.integers(len(present)))]
        out.append(make_quadruple(world, v, goal, int(rng.integers(2**31)), bool(rng.integers(2)), mask_salient))
    return out


def save_quadruples(quads: Sequence[Quadruple], path) -> None:
    arrays = {}
    for i, q in enumerate(quads):
        arrays[f"obs_{i}"] = q.obs.astype(np.float32)
        arrays[f"imagined_{i}"] = q.imagined.astype(np.float32)
        arrays[f"inpainted_{i}"] = q.inpainted.astype(np.float32)
        arrays[f"gt_{i}"] = q.gt_mask
    np.savez_compressed(path, count=np.array(len(quads)), **arrays)


def load_quadruples(path) -> list[Quadruple]:
    with np.load(path) as data:
        n = int(data["count"])
        return [
            Quadruple(data[f"obs_{i}"], data[f"imagined_{i}"], data[f"inpainted_{i}"], data[f"gt_{i}"])
            for i in range(n)
        ]


# --------------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch: int = 32
    patience: int = 5
    min_delta: float = 0.0
    seed: int = 0
    dim: int = 16
    n_heads: int = 2
    val_fraction: float = 0.1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    best_val_loss: float

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_dice": self.val_dice}


@dataclass
class TrainResult:
    params: PafParams
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


class Adam:
    def __init__(self, params: PafParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.map(np.zeros_like)
        self.v = params.map(np.zeros_like)
        self.t = 0

    def step(self, params: PafParams, grads: PafParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m.arrays(), self.v.arrays()):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def evaluate_dataset(params: PafParams, quads: Sequence[Quadruple],
                     cells: Sequence[_Unique] | None = None) -> tuple[float, float]:
    """Mean total loss and mean hard Dice coefficient."""
    losses, dices = [], []
    for i, q in enumerate(quads):
        cache = _forward(params, q.obs, q.imagined, q.inpainted, cells[i] if cells else None)
        pred = cache.a_unique[cache.inv_q].reshape(cache.shape)
        losses.append(loss(pred, q.gt_mask).total)
        dices.append(dice_coefficient(pred, q.gt_mask))
    return float(np.mean(losses)), float(np.mean(dices))


def split_dataset(dataset: Sequence[Quadruple], seed: int, val_fraction: float = 0.1):
    order = np.random.default_rng([seed, 0x5B1]).permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset)))) if len(dataset) > 1 else 0
    val = [dataset[i] for i in order[:n_val]]
    train = [dataset[i] for i in order[n_val:]]
    return train, val


def train(dataset: Sequence[Quadruple], config: TrainConfig | None = None, init: PafParams | None = None,
          on_epoch=None) -> TrainResult:
    config = config or TrainConfig()
    if not dataset:
        raise ConfigurationError("cannot train on an empty dataset")
    train_set, val_set = split_dataset(dataset, config.seed, config.val_fraction)
    if not val_set:
        val_set = train_set
    channels = dataset[0].obs.shape[-1]
    if init is not None:
        params = init.copy()
    else:
        prior = float(np.mean([q.gt_mask.mean() for q in train_set]))
        prior = min(max(prior, 1e-3), 1.0 - 1e-3)
        params = init_params(channels, config.dim, config.n_heads, config.seed, prior=prior)
    # the inputs never change, so de-duplicate their cells once up front
    train_cells = [_unique_cells(params, q.obs, q.imagined, q.inpainted) for q in train_set]
    val_cells = [_unique_cells(params, q.obs, q.imagined, q.inpainted) for q in val_set]
    opt = Adam(params, config.lr)
    rng = np.random.default_rng([config.seed, 0x7EA])
    best_params, best_val, best_epoch, bad = params.copy(), math.inf, 0, 0
    result = TrainResult(best_params)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for start in range(0, len(order), config.batch):
            batch = order[start : start + config.batch]
            acc = params.map(np.zeros_like)
            for i in batch:
                value, g, _ = loss_and_grad(params, train_set[i], train_cells[i])
                epoch_losses.append(value.total)
                for a, b in zip(acc.arrays(), g.arrays()):
                    a += b
            grads = acc.map(lambda a: a / len(batch))
            opt.step(params, grads)
        val_loss, val_dice = evaluate_dataset(params, val_set, val_cells)
        if val_loss < best_val - config.min_delta:
            best_val, best_params, best_epoch, bad = val_loss, params.copy(), epoch, 0
        else:
            bad += 1
        record = EpochRecord(epoch, float(np.mean(epoch_losses)), val_loss, val_dice, best_val)
        result.log.append(record)
        log.info("epoch %d train %.4f val %.4f dice %.4f", epoch, record.train_loss, val_loss, val_dice)
        if on_epoch is not None:
            on_epoch(record)
        if bad >= config.patience:
            result.stopped_early = True
            break
    result.params, result.best_epoch = best_params, best_epoch
    return result


def write_train_log(records: Iterable[EpochRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# --------------------------------------------------------------------------- params file

def params_to_bytes(params: PafParams) -> bytes:
    header = PARAMS_MAGIC + struct.pack("<IIII", PARAMS_VERSION, params.channels, params.dim, params.n_heads)
    body = b"".join(np.ascontiguousarray(a, "<f4").tobytes() for a in params.arrays())
    return header + body


def params_from_bytes(data: bytes) -> PafParams:
    if data[:4] != PARAMS_MAGIC:
        raise ConfigurationError("not a filter parameter file (bad magic)")
    version, c, d, nh = struct.unpack("<IIII", data[4:20])
    if version != PARAMS_VERSION:
        raise ConfigurationError(f"unsupported parameter file version {version}")
    dh = d // nh
    shapes = [(c, d), (d,), (nh, d, dh), (nh, d, dh), (nh, d, dh), (d,), ()]
    body = np.frombuffer(data[20:], "<f4")
    need = sum(int(np.prod(s)) for s in shapes)
    if body.size != need:
        raise ConfigurationError(f"parameter body has {body.size} floats, expected {need}")
    arrays, offset = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(body[offset : offset + size].reshape(s).astype(np.float32))
        offset += size
    return PafParams(*arrays)


def save_params(params: PafParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> PafParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def random_quadruple(rng: np.random.Generator, height: int, width: int, k: int, channels: int,
                     dtype=np.float64) -> Quadruple:
    """Unstructured instance for gradient and property checks."""
    return Quadruple(
        rng.uniform(0, 1, (height, width * k, channels)).astype(dtype),
        rng.uniform(0, 1, (height, width, channels)).astype(dtype),
        rng.uniform(0, 1, (height, width, channels)).astype(dtype),
        rng.random((height, width * k)) < 0.4,
    )

