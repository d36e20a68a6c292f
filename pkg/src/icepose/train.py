"""Adam training loop, evaluation metrics, baseline predictor and report formatting."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import to_floats, to_int
from .dataset import DatasetManifest, load_samples, load_split
from .errors import ConfigError, DegeneracyError, DimensionError, DivergenceError
from .geometry import decode_rot6d, encode_rot6d, per_axis_orientation_error, position_error
from .tensor import Tensor
from .vit import PosePrediction, ViTConfig, ViTParams, forward, init_params, loss, predict, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 2.0
    shuffle_seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 10  # epochs; 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not self.learning_rate > 0 or self.checkpoint_every < 0:
            raise ConfigError("learning_rate must be positive and checkpoint_every non-negative")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> TrainConfig:
        preset = kv.get("train.preset", "desk").strip()
        if preset not in PRESETS:
            raise ConfigError(f"unknown train preset {preset!r}; choose from {sorted(PRESETS)}")
        updates = {}
        for f in fields(cls):
            key = f"train.{f.name}"
            if key in kv:
                updates[f.name] = to_int(kv[key], key) if f.type == "int" else to_floats(kv[key], 1, key)[0]
        return replace(PRESETS[preset], **updates)


PRESETS = {
    "desk": TrainConfig(),
    "overfit": TrainConfig(epochs=300),
    "paper": TrainConfig(epochs=140),
}


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if params.keys() != grads.keys():
        raise DimensionError("params and grads must have the same names")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} vs param {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"{name}: optimizer state shape mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params[name] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ViTParams
    loss_log: list[tuple[int, int, float]]
    val_log: list[tuple[int, float]]
    checkpoints: list[Path]


def check_compatible(manifest: DatasetManifest, vit_config: ViTConfig) -> None:
    if tuple(manifest.image_shape) != (vit_config.image_h, vit_config.image_w):
        raise ConfigError(
            f"dataset images are {manifest.image_shape}, model expects {(vit_config.image_h, vit_config.image_w)}"
        )


def batch_loss(params: ViTParams, vit_config: ViTConfig, images, positions, rot6d, lam: float) -> Tensor:
    return loss(forward(params, vit_config, images), positions, rot6d, lam)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def train(
    train_config: TrainConfig,
    vit_config: ViTConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    params: ViTParams | None = None,
) -> TrainResult:
    """Minibatch Adam on the weighted MSE loss; fully determined by the seeds.

    Writes ``loss_log.csv`` (epoch, step, loss per batch), ``val_log.csv`` and
    checkpoints into ``out_dir`` when given.
    """
    check_compatible(manifest, vit_config)
    images, positions, rot6d = load_split(manifest, "train")
    has_val = "val" in manifest.splits and manifest.split_size("val") > 0
    val = load_split(manifest, "val") if has_val else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = params or init_params(vit_config, train_config.init_seed)
    state = AdamState()
    n = len(images)
    loss_log: list[tuple[int, int, float]] = []
    val_log: list[tuple[int, float]] = []
    checkpoints: list[Path] = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.shuffle_seed, epoch]).permutation(n)
        for b, start in enumerate(range(0, n, train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            params.zero_grad()
            value = batch_loss(params, vit_config, images[idx], positions[idx], rot6d[idx], train_config.lam)
            lv = value.item()
            if not np.isfinite(lv):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            T.backward(value)
            grads = {k: t.grad for k, t in params.items()}
            new, state = adam_step(params.arrays(), grads, state, train_config)
            for k, t in params.items():
                t.data = new[k]
            step += 1
            loss_log.append((epoch, step, lv))
        if val is not None:
            with T.no_grad():
                vl = batch_loss(params, vit_config, *val, train_config.lam).item()
            val_log.append((epoch, vl))
        epoch_mean = float(np.mean([l for e, _, l in loss_log if e == epoch]))
        log.info("epoch %d train %.4f%s", epoch, epoch_mean, f" val {val_log[-1][1]:.4f}" if val is not None else "")
        if out is not None and train_config.checkpoint_every and epoch % train_config.checkpoint_every == 0:
            checkpoints.append(
                save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.ckpt", params, vit_config, {"epoch": epoch, "step": step})
            )

    if out is not None:
        checkpoints.append(save_checkpoint(out / "model.ckpt", params, vit_config, {"epoch": train_config.epochs, "step": step}))
        _write_csv(out / "loss_log.csv", ["epoch", "step", "loss"], loss_log)
        _write_csv(out / "val_log.csv", ["epoch", "val_loss"], val_log)
    return TrainResult(params, loss_log, val_log, checkpoints)


def epoch_means(loss_log: list[tuple[int, int, float]]) -> list[float]:
    epochs = sorted({e for e, _, _ in loss_log})
    return [float(np.mean([l for e, _, l in loss_log if e == ep])) for ep in epochs]


def smoothed(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


# --------------------------------------------------------------------------
# evaluation

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class MetricsReport:
    mean_position_error: float
    std_position_error: float
    mean_orientation_error: np.ndarray
    std_orientation_error: np.ndarray
    n_samples: int
    n_failed: int
    per_sample: list[dict]

    def table(self) -> str:
        return format_table(
            self.mean_position_error, self.std_position_error, self.mean_orientation_error, self.std_orientation_error
        )

    def to_json(self) -> dict:
        return {
            "mean_position_error_mm": self.mean_position_error,
            "std_position_error_mm": self.std_position_error,
            "mean_orientation_error_deg": [float(x) for x in self.mean_orientation_error],
            "std_orientation_error_deg": [float(x) for x in self.std_orientation_error],
            "n_samples": self.n_samples,
            "n_failed": self.n_failed,
            "std_kind": "population",
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        txt = out / f"{stem}.txt"
        txt.write_text(
            self.table() + f"\nsamples: {self.n_samples} evaluated, {self.n_failed} failed (std: population)\n"
        )
        js = out / f"{stem}.json"
        js.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        rows = out / f"{stem}_errors.csv"
        cols = ["subject_id", "sample_id", "status", "position_error_mm", "ori_x_deg", "ori_y_deg", "ori_z_deg"]
        _write_csv(rows, cols, ([r[c] for c in cols] for r in self.per_sample))
        return [txt, js, rows]


def aggregate(per_sample: list[dict]) -> MetricsReport:
    """Mean and population std over the successful rows of a per-sample table."""
    ok = [r for r in per_sample if r["status"] == "ok"]
    if ok:
        pos = np.array([r["position_error_mm"] for r in ok])
        ori = np.array([[r["ori_x_deg"], r["ori_y_deg"], r["ori_z_deg"]] for r in ok])
        mp, sp = float(pos.mean()), float(pos.std())
        mo, so = ori.mean(axis=0), ori.std(axis=0)
    else:
        mp = sp = float("nan")
        mo = so = np.full(3, np.nan)
    return MetricsReport(mp, sp, mo, so, len(ok), len(per_sample) - len(ok), per_sample)


def per_sample_errors(
    p_hat: np.ndarray, o_hat: np.ndarray, positions: np.ndarray, rot6d: np.ndarray, ids: list[tuple[int, int]]
) -> list[dict]:
    rows = []
    for (sid, k), ph, oh, pt, ot in zip(ids, p_hat, o_hat, positions, rot6d):
        row = {"subject_id": sid, "sample_id": k}
        try:
            r_pred = decode_rot6d(oh)
        except DegeneracyError:
            row.update(status="degenerate", position_error_mm="", ori_x_deg="", ori_y_deg="", ori_z_deg="")
            rows.append(row)
            continue
        ang = per_axis_orientation_error(r_pred, decode_rot6d(ot))
        row.update(
            status="ok",
            position_error_mm=position_error(ph, pt),
            ori_x_deg=float(ang[0]),
            ori_y_deg=float(ang[1]),
            ori_z_deg=float(ang[2]),
        )
        rows.append(row)
    return rows


def evaluate(
    params: ViTParams | None,
    vit_config: ViTConfig | None,
    manifest: DatasetManifest,
    split: str = "test",
    predictor: Predictor | None = None,
) -> MetricsReport:
    """Per-sample position / per-axis orientation errors and their aggregates.

    ``predictor(images, positions, rot6d) -> (p_hat, o_hat)`` overrides the
    network (used for baselines and test hooks).
    """
    samples = load_samples(manifest, split, range(manifest.split_size(split)))
    images = np.stack([s.image for s in samples]).astype(np.float64)
    positions = np.stack([s.pose_mesh.position for s in samples])
    rot6d = np.stack([encode_rot6d(s.pose_mesh.orientation) for s in samples])
    if predictor is None:
        check_compatible(manifest, vit_config)
        p_hat, o_hat = predict(params, vit_config, images)
    else:
        p_hat, o_hat = predictor(images, positions, rot6d)
    ids = [(s.subject_id, s.sample_id) for s in samples]
    return aggregate(per_sample_errors(np.asarray(p_hat), np.asarray(o_hat), positions, rot6d, ids))


def target_predictor(images, positions, rot6d):
    """Test hook: predictions equal to the targets."""
    return positions.copy(), rot6d.copy()


def baseline_predictor(manifest: DatasetManifest, split: str = "train") -> PosePrediction:
    """Constant prediction: mean position and chordal-mean rotation of ``split``."""
    n = manifest.split_size(split)
    if n == 0:
        raise ConfigError(f"split {split!r} is empty")
    samples = load_samples(manifest, split, range(n))
    p = np.mean([s.pose_mesh.position for s in samples], axis=0)
    m = np.mean([s.pose_mesh.orientation for s in samples], axis=0)
    o = encode_rot6d(decode_rot6d(np.concatenate([m[:, 0], m[:, 1]])))
    return PosePrediction(Tensor(p[None, :]), Tensor(o[None, :]))


def constant_predictor(pred: PosePrediction) -> Predictor:
    p, o = pred.p_hat.data[0], pred.o_hat.data[0]

    def run(images, positions, rot6d):
        b = len(images)
        return np.tile(p, (b, 1)), np.tile(o, (b, 1))

    return run


# --------------------------------------------------------------------------
# report formatting


def _vec(v) -> str:
    return "(" + ", ".join(f"{x:.2f}" for x in v) + ")"


def format_table(mean_pos: float, std_pos: float, mean_ori, std_ori, title: str = "Prediction error") -> str:
    """Two-row (mean / std) position and orientation error table."""
    rows = [
        ["", "Position", "Orientation"],
        ["Mean error", f"{mean_pos:.2f} [mm]", f"{_vec(mean_ori)} [degree]"],
        ["Std", f"{std_pos:.2f} [mm]", f"{_vec(std_ori)} [degree]"],
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(r):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"

    return "\n".join([title, rule, line(rows[0]), rule, line(rows[1]), line(rows[2]), rule])
