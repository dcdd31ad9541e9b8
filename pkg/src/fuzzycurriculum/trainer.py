"""Gradient-descent training under the curriculum objective, plus diagnostics.

Two models are available. ``per-voxel`` trains the logit field directly
(theta = z), which makes the objective separable across voxels. ``tiny-conv``
maps an intensity volume to logits through two 3x3x3 convolutions with a
ReLU in between, so all voxels share parameters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import losses
from .curriculum import CurriculumSchedule, lambda_at, make_rho
from .errors import DivergenceError, InsufficientData, InvalidParameter, ShapeMismatch
from .losses import FixedRho
from .volume import FuzzyLabelVolume, LabelVolume, LogitField, ProbField, ScalarField

MODELS = ("per-voxel", "tiny-conv")
AUX_LOSSES = ("fuzzy", "ce")


# ---------------------------------------------------------------------------
# diagnostics


def grad_cosine(g1, g2) -> float:
    a = np.ravel(np.asarray(g1, dtype=np.float64))
    b = np.ravel(np.asarray(g2, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeMismatch(f"gradient lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def uncertainty_map(p) -> ScalarField:
    """Per-voxel ``1 - max_c p_c``."""
    data = p.data if isinstance(p, ProbField) else np.asarray(p)
    return ScalarField(1.0 - data.astype(np.float64).max(axis=-1))


def dice_score(pred: LabelVolume, truth: LabelVolume, c: int) -> float:
    if pred.dims != truth.dims:
        raise ShapeMismatch(f"prediction {pred.dims} and reference {truth.dims} differ")
    a = pred.data == c
    b = truth.data == c
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


# ---------------------------------------------------------------------------
# models


_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def _conv3(x, w):
    """'Same' zero-padded 3x3x3 correlation of ``x`` (d, h, w, ci) with ``w`` (27, ci, co)."""
    d, h, wd, ci = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((d * h * wd, w.shape[2]))
    for k, (a, b, c) in enumerate(_OFFSETS):
        out += padded[a : a + d, b : b + h, c : c + wd].reshape(-1, ci) @ w[k]
    return out.reshape(d, h, wd, -1)


def _conv3_weight_grad(x, g):
    d, h, wd, ci = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    flat_g = g.reshape(-1, g.shape[-1])
    return np.stack([padded[a : a + d, b : b + h, c : c + wd].reshape(-1, ci).T @ flat_g for a, b, c in _OFFSETS])


def _conv3_input_grad(g, w):
    # adjoint of a correlation is a correlation with the flipped, transposed kernel
    return _conv3(g, w[::-1].transpose(0, 2, 1))


@dataclass
class TinyConvModel:
    """conv3d(1 -> hidden) -> ReLU -> conv3d(hidden -> C), 'same' padding.

    Kernels are stored as ``(27, in, out)`` with the 27 taps in z-major order.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, hidden, num_classes, seed, out_bias=None, out_scale=1.0):
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((27, 1, hidden)) * math.sqrt(2.0 / 27)
        w2 = rng.standard_normal((27, hidden, num_classes)) * (out_scale * math.sqrt(1.0 / (27 * hidden)))
        b2 = np.zeros(num_classes) if out_bias is None else np.asarray(out_bias, dtype=np.float64)
        return cls(w1, np.zeros(hidden), w2, b2)

    @staticmethod
    def parameter_count(hidden, num_classes):
        return 27 * hidden + hidden + 27 * hidden * num_classes + num_classes

    @property
    def num_parameters(self):
        return sum(a.size for a in (self.w1, self.b1, self.w2, self.b2))

    def flat(self):
        return np.concatenate([a.ravel() for a in (self.w1, self.b1, self.w2, self.b2)])

    def forward(self, intensity):
        x = np.asarray(intensity, dtype=np.float64)[..., None]
        a1 = _conv3(x, self.w1) + self.b1
        h1 = np.maximum(a1, 0.0)
        z = _conv3(h1, self.w2) + self.b2
        return z, (x, a1, h1)

    def backward(self, d_z, cache):
        """Flat parameter gradient for an upstream logit gradient ``d_z``."""
        x, a1, h1 = cache
        g_w2 = _conv3_weight_grad(h1, d_z)
        g_b2 = d_z.reshape(-1, d_z.shape[-1]).sum(axis=0)
        d_a1 = _conv3_input_grad(d_z, self.w2) * (a1 > 0.0)
        g_w1 = _conv3_weight_grad(x, d_a1)
        g_b1 = d_a1.reshape(-1, d_a1.shape[-1]).sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def apply_update(self, delta):
        sizes = [a.size for a in (self.w1, self.b1, self.w2, self.b2)]
        parts = np.split(delta, np.cumsum(sizes)[:-1])
        return TinyConvModel(
            self.w1 + parts[0].reshape(self.w1.shape),
            self.b1 + parts[1],
            self.w2 + parts[2].reshape(self.w2.shape),
            self.b2 + parts[3],
        )


# ---------------------------------------------------------------------------
# configuration and trajectory


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 200.0
    # None: rho shares learning_rate
    rho_learning_rate: Optional[float] = 0.05
    schedule: Optional[CurriculumSchedule] = None
    rho_init: Tuple[float, float] = (0.5, 0.5)
    # frozen (rho1, rho2); values may be 1.0, used for ablations/equivalences
    fixed_rho: Optional[Tuple[float, float]] = None
    model: str = "per-voxel"
    hidden: int = 4
    # tiny-conv: start the output bias at the log class frequencies of the labels
    prior_bias_init: bool = False
    seed: int = 0
    init_scale: float = 0.01
    dice_target: str = "hard"
    dice_weight: float = 1.0
    aux_loss: str = "fuzzy"
    momentum: float = 0.0
    record_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidParameter("steps must be >= 1")
        if self.learning_rate < 0:
            raise InvalidParameter("learning_rate must be >= 0")
        if self.rho_learning_rate is not None and self.rho_learning_rate < 0:
            raise InvalidParameter("rho_learning_rate must be >= 0")
        if self.model not in MODELS:
            raise InvalidParameter(f"model must be one of {MODELS}")
        if self.dice_target not in ("hard", "soft"):
            raise InvalidParameter("dice_target must be 'hard' or 'soft'")
        if self.aux_loss not in AUX_LOSSES:
            raise InvalidParameter(f"aux_loss must be one of {AUX_LOSSES}")
        if self.record_every < 1:
            raise InvalidParameter("record_every must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameter("momentum must lie in [0, 1)")
        if self.schedule is None:
            object.__setattr__(self, "schedule", CurriculumSchedule.default_for(self.steps))
        elif isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", CurriculumSchedule(**self.schedule))
        object.__setattr__(self, "rho_init", tuple(self.rho_init))
        if self.fixed_rho is not None:
            object.__setattr__(self, "fixed_rho", tuple(self.fixed_rho))

    @property
    def effective_rho_lr(self):
        return self.learning_rate if self.rho_learning_rate is None else self.rho_learning_rate

    def to_dict(self):
        out = asdict(self)
        out["rho_init"] = list(self.rho_init)
        if self.fixed_rho is not None:
            out["fixed_rho"] = list(self.fixed_rho)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = CurriculumSchedule(**d["schedule"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameter(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


BASE_COLUMNS = ["t", "lambda", "rho1", "rho2", "loss_total", "loss_dice", "loss_fuzzy", "grad_cos"]


def trajectory_columns(num_classes):
    return BASE_COLUMNS + [f"dice_c{c}" for c in range(1, num_classes)] + ["mean_uncertainty"]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class TrainingTrajectory:
    columns: List[str]
    rows: List[dict] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.config_hash:
            buf.write(f"# config_hash={self.config_hash}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        config_hash = ""
        while lines and lines[0].startswith("#"):
            key, _, value = lines.pop(0)[1:].strip().partition("=")
            if key == "config_hash":
                config_hash = value
        reader = csv.reader(lines)
        columns = next(reader)
        rows = []
        for rec in reader:
            row = {c: float(v) for c, v in zip(columns, rec)}
            row["t"] = int(row["t"])
            rows.append(row)
        return cls(columns=columns, rows=rows, config_hash=config_hash)


@dataclass
class TrainResult:
    model: object
    rho: object
    trajectory: TrainingTrajectory
    probs: np.ndarray

    def logit_field(self, intensity=None):
        if isinstance(self.model, TinyConvModel):
            z, _ = self.model.forward(intensity)
            return LogitField(z)
        return LogitField(self.model)


def pareto_trace(traj: TrainingTrajectory):
    """Objective-space points ``(t, loss_dice, loss_fuzzy)`` in step order."""
    return [(row["t"], row["loss_dice"], row["loss_fuzzy"]) for row in traj.rows]


def pareto_csv(traj: TrainingTrajectory) -> str:
    buf = io.StringIO()
    if traj.config_hash:
        buf.write(f"# config_hash={traj.config_hash}\n")
    buf.write("t,loss_dice,loss_fuzzy\n")
    for t, d, f in pareto_trace(traj):
        buf.write(f"{_fmt(t)},{_fmt(d)},{_fmt(f)}\n")
    return buf.getvalue()


def stability_metrics(traj, column="loss_total"):
    values = traj.column(column) if isinstance(traj, TrainingTrajectory) else np.asarray(traj, dtype=np.float64)
    if values.size < 20:
        raise InsufficientData(f"need at least 20 recorded steps, got {values.size}")
    tail = values[values.size // 2 :]
    return {
        "loss_variance_tail": float(np.var(tail)),
        "max_step_jump": float(np.max(np.abs(np.diff(values)))),
    }


# ---------------------------------------------------------------------------
# training


def _predict_labels(p):
    return p.argmax(axis=-1).astype(np.uint8)


def _objective(z, mu, dice_target, rho, lam, cfg):
    if cfg.aux_loss == "fuzzy":
        return losses.total_loss(z, mu, dice_target, rho, lam, dice_weight=cfg.dice_weight)
    return losses.total_loss_ce(z, mu, dice_target, lam, dice_weight=cfg.dice_weight)


def train(labels: LabelVolume, fuzzy: FuzzyLabelVolume, cfg: TrainConfig, intensity=None, reference=None, config_hash=""):
    """Run plain gradient descent on ``dice + lambda(t) * aux`` for ``cfg.steps``.

    ``labels`` supply the hard Dice target, ``fuzzy`` the memberships.
    ``reference`` (default: ``labels``) is what recorded Dice scores are
    measured against. ``intensity`` is required by the tiny-conv model.
    """
    if labels.dims != fuzzy.dims or labels.num_classes != fuzzy.num_classes:
        raise ShapeMismatch("labels and fuzzy labels disagree on shape or classes")
    reference = labels if reference is None else reference
    if reference.dims != labels.dims:
        raise ShapeMismatch("reference labels have a different shape")
    num_classes = labels.num_classes
    mu = fuzzy.mu.astype(np.float64)
    dice_target = labels.one_hot() if cfg.dice_target == "hard" else mu
    rng = np.random.default_rng(cfg.seed)

    if cfg.model == "per-voxel":
        model = cfg.init_scale * rng.standard_normal(labels.dims + (num_classes,))
        x = None
    else:
        if intensity is None:
            raise InvalidParameter("tiny-conv model needs an intensity volume")
        x = intensity.data if isinstance(intensity, ScalarField) else np.asarray(intensity)
        if tuple(x.shape) != labels.dims:
            raise ShapeMismatch("intensity volume has a different shape")
        out_bias = None
        if cfg.prior_bias_init:
            freq = np.bincount(labels.data.ravel(), minlength=num_classes) / labels.data.size
            out_bias = np.log(np.maximum(freq, 1.0 / labels.data.size))
        model = TinyConvModel.init(
            cfg.hidden, num_classes, int(rng.integers(2**31)), out_bias=out_bias, out_scale=cfg.init_scale
        )

    learn_rho = cfg.fixed_rho is None and cfg.aux_loss == "fuzzy"
    rho = make_rho(*cfg.rho_init) if cfg.fixed_rho is None else FixedRho(*cfg.fixed_rho)
    traj = TrainingTrajectory(columns=trajectory_columns(num_classes), seed=cfg.seed, config_hash=config_hash)
    velocity = 0.0
    p = None

    for t in range(cfg.steps):
        lam = lambda_at(cfg.schedule, t)
        if x is None:
            z, cache = model, None
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                z, cache = model.forward(x)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite logits at step {t}", state={"t": t, "rho": rho})
        breakdown, grads = _objective(z, mu, dice_target, rho, lam, cfg)
        p = losses.softmax(z)

        if x is None:
            g_theta = grads.d_logits
            g_fuzzy, g_dice = grads.d_logits_fuzzy, grads.d_logits_dice
        else:
            g_fuzzy = model.backward(grads.d_logits_fuzzy, cache)
            g_dice = model.backward(grads.d_logits_dice, cache)
            g_theta = cfg.dice_weight * g_dice + lam * g_fuzzy

        if not (math.isfinite(breakdown.total) and np.all(np.isfinite(g_theta))):
            raise DivergenceError(f"non-finite loss or gradient at step {t}", state={"t": t, "model": model, "rho": rho})

        if t % cfg.record_every == 0:
            pred = LabelVolume(_predict_labels(p), num_classes)
            row = {
                "t": t,
                "lambda": lam,
                "rho1": rho.rho1,
                "rho2": rho.rho2,
                "loss_total": breakdown.total,
                "loss_dice": breakdown.dice,
                "loss_fuzzy": breakdown.fuzzy,
                "grad_cos": grad_cosine(g_fuzzy, g_dice),
                "mean_uncertainty": float(np.mean(1.0 - p.max(axis=-1))),
            }
            for c in range(1, num_classes):
                row[f"dice_c{c}"] = dice_score(pred, reference, c)
            traj.rows.append(row)

        velocity = cfg.momentum * velocity + g_theta
        if x is None:
            model = model - cfg.learning_rate * velocity
        else:
            model = model.apply_update(-cfg.learning_rate * velocity)
        if learn_rho:
            rho = rho.step(grads.d_rho1_raw, grads.d_rho2_raw, cfg.effective_rho_lr)
        flat = model if x is None else model.flat()
        if not np.all(np.isfinite(flat)):
            raise DivergenceError(f"parameters left the finite range after step {t}", state={"t": t, "rho": rho})

    if x is None:
        p = losses.softmax(model)
    else:
        p = losses.softmax(model.forward(x)[0])
    if not np.all(np.isfinite(p)):
        raise DivergenceError("final model produced non-finite probabilities", state={"model": model, "rho": rho})
    return TrainResult(model=model, rho=rho, trajectory=traj, probs=p)


def final_dice(result: TrainResult, reference: LabelVolume):
    """Mean foreground Dice score of the trained model's argmax prediction."""
    pred = LabelVolume(_predict_labels(result.probs), reference.num_classes)
    scores = [dice_score(pred, reference, c) for c in range(1, reference.num_classes)]
    return float(np.mean(scores))
