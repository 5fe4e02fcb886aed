"""Score fusion model and its training loop.

The viewwise and pointwise features are fused by a small MLP into a single
JOD estimate (0 = undistorted, more negative = worse). Training minimizes
MSE against JOD labels with Adam; one scene per dataset tag is held out to
pick the checkpoint. Labels are standardized internally (stored with the
weights) so the network head works at unit scale regardless of label range.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .pointwise import PointwiseNet, _slice_tensor
from .viewwise import ViewwiseNet


def _slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    return _slice_tensor(t, (slice(start, stop),))

MODEL_MAGIC = b"NQAMDL1\x00"
MODEL_VERSION = 1


@dataclass(frozen=True)
class JodScore:
    """Quality in just-objectionable-difference units; 0 = undistorted."""

    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("JOD score must be finite")


@dataclass
class TrainingExample:
    scene_id: str
    view_features: np.ndarray  # (F, L) per-view feature matrix
    point_values: np.ndarray  # (n, 2, b, L, 3)
    point_masks: np.ndarray  # (n, 2, b)
    point_xyz: np.ndarray  # (n, 3)
    label: float | None = None
    method_id: str = ""
    dataset: str = ""


@dataclass(frozen=True)
class ModelConfig:
    bins: int = 8
    resample: int = 16
    view_features: int = 36
    view_channels: tuple = (64, 128, 128)
    view_embed: int = 64
    expansion: int = 4
    se_reduction: int = 4
    conv3d_channels: tuple = (16, 32, 32, 32)
    point_embed: int = 64
    pointnet_hidden: int = 128
    point_feature: int = 64
    fusion_hidden: int = 64
    ablate_pointwise: bool = False
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        for key in ("view_channels", "conv3d_channels"):
            raw[key] = tuple(raw[key])
        return cls(**raw)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


REDUCED_CONFIG = ModelConfig(
    bins=2,
    resample=4,
    view_features=6,
    view_channels=(8, 8, 8),
    view_embed=4,
    expansion=2,
    se_reduction=2,
    conv3d_channels=(4, 4, 4, 4),
    point_embed=4,
    pointnet_hidden=8,
    point_feature=4,
    fusion_hidden=8,
)


class QualityModel(nn.Module):
    def __init__(self, config: ModelConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.viewwise = ViewwiseNet(
            rng,
            in_features=config.view_features,
            channels=config.view_channels,
            embed=config.view_embed,
            expansion=config.expansion,
            se_reduction=config.se_reduction,
        )
        if not config.ablate_pointwise:
            self.pointwise = PointwiseNet(
                rng,
                bins=config.bins,
                length=config.resample,
                conv_channels=config.conv3d_channels,
                point_embed=config.point_embed,
                hidden=config.pointnet_hidden,
                embed=config.point_feature,
            )
        fusion_in = config.view_embed + (
            0 if config.ablate_pointwise else config.point_feature
        )
        self.fusion = nn.MLP([fusion_in, config.fusion_hidden, 1], rng)
        # label standardization buffers travel with the weights
        self.label_mean = Tensor(np.zeros(1))
        self.label_scale = Tensor(np.ones(1))

    def forward(self, example: TrainingExample) -> Tensor:
        feats = np.asarray(example.view_features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] != self.config.view_features:
            raise ValueError(
                f"view features {feats.shape} do not match config "
                f"({self.config.view_features}, L)"
            )
        v = self.viewwise(Tensor(feats))
        if self.config.ablate_pointwise:
            h = v
        else:
            q = self.pointwise(
                Tensor(np.asarray(example.point_values, dtype=np.float32)),
                Tensor(np.asarray(example.point_masks, dtype=np.float32)),
                example.point_xyz,
            )
            h = ad.concat([v, q])
        out = self.fusion(h)  # (1,)
        return out * self.label_scale + self.label_mean

    def forward_batch(self, examples) -> Tensor:
        """Predictions for a minibatch, shape (B,).

        The pointwise distiller runs once over all examples' stacked points,
        which keeps the conv3d work in a few large GEMMs per step.
        """
        views = [
            ad.reshape(self.viewwise(Tensor(np.asarray(ex.view_features, dtype=np.float32))), (1, -1))
            for ex in examples
        ]
        v = ad.concat(views, axis=0)  # (B, D_v)
        if self.config.ablate_pointwise:
            fused_in = v
        else:
            counts = [ex.point_values.shape[0] for ex in examples]
            stacked_values = Tensor(
                np.concatenate([ex.point_values for ex in examples]).astype(np.float32)
            )
            stacked_masks = Tensor(
                np.concatenate([ex.point_masks for ex in examples]).astype(np.float32)
            )
            per_point = self.pointwise.distiller.batch(stacked_values, stacked_masks)
            rows = []
            offset = 0
            for ex, n in zip(examples, counts):
                chunk = _slice_rows(per_point, offset, offset + n)
                q = self.pointwise.aggregator(chunk, ex.point_xyz)
                rows.append(ad.reshape(q, (1, -1)))
                offset += n
            fused_in = ad.concat([v, ad.concat(rows, axis=0)], axis=1)
        out = self.fusion(fused_in)  # (B, 1)
        return ad.reshape(out, (-1,)) * self.label_scale + self.label_mean

    def predict(self, example: TrainingExample) -> JodScore:
        return JodScore(value=float(self.forward(example).data[0]))


class Adam:
    """Adam with bias correction; update = -lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient in Adam step")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    model: QualityModel
    history: list  # rows: {"epoch", "train_loss", "val_loss"}
    best_epoch: int
    diverged: bool = False


def _split_validation(dataset, seed):
    """Hold out one scene per dataset tag for checkpoint selection."""
    by_tag = {}
    for ex in dataset:
        by_tag.setdefault(ex.dataset, set()).add(ex.scene_id)
    rng = np.random.default_rng([seed, 0x5EED])
    held = set()
    for tag in sorted(by_tag):
        scenes = sorted(by_tag[tag])
        if len(scenes) > 1:
            held.add((tag, scenes[rng.integers(len(scenes))]))
    train = [ex for ex in dataset if (ex.dataset, ex.scene_id) not in held]
    val = [ex for ex in dataset if (ex.dataset, ex.scene_id) in held]
    return train, val or train


def train(dataset, config: ModelConfig, *, epochs: int = 200, batch_size: int = 10,
          lr: float = 1e-4, seed: int = 0, checkpoint_dir=None) -> TrainResult:
    """Fit a generalized model on labeled examples; no per-scene fine-tuning.

    Shuffling is seeded, the best-validation checkpoint is returned, and a
    non-finite loss aborts with the last finite checkpoint.
    """
    labeled = [ex for ex in dataset if ex.label is not None]
    if not labeled:
        raise ValueError("training needs at least one labeled example")
    model = QualityModel(config)
    train_set, val_set = _split_validation(labeled, seed)
    labels = np.array([ex.label for ex in train_set])
    model.label_mean.data = np.array([labels.mean()], dtype=np.float32)
    model.label_scale.data = np.array([max(labels.std(), 1e-6)], dtype=np.float32)

    optimizer = Adam(model.parameters(), lr=lr)
    history = []
    best = {"epoch": -1, "val": np.inf, "state": model.state_arrays()}
    diverged = False
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def epoch_loss(examples, update):
        total = 0.0
        order = np.arange(len(examples))
        if update:
            np.random.default_rng([seed, 1 + len(history)]).shuffle(order)
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start : start + batch_size]]
            optimizer.zero_grad()
            labels = np.array([ex.label for ex in batch], dtype=np.float32)
            residuals = model.forward_batch(batch) - labels
            loss = ad.mean(residuals * residuals)
            if update:
                loss.backward()
                optimizer.step()
            total += float(loss.data) * len(batch)
        return total / len(order)

    for epoch in range(epochs):
        try:
            train_loss = epoch_loss(train_set, update=True)
            val_loss = epoch_loss(val_set, update=False) if val_set is not train_set else train_loss
        except FloatingPointError:
            diverged = True
            break
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            diverged = True
            break
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best["val"]:
            best = {"epoch": epoch, "val": val_loss, "state": model.state_arrays()}
        if checkpoint_dir is not None:
            save_model(checkpoint_dir / f"epoch{epoch:04d}.nqm", model)

    model.load_state_arrays(best["state"])
    return TrainResult(model=model, history=history, best_epoch=best["epoch"],
                       diverged=diverged)


def save_model(path, model: QualityModel):
    """Write magic, version, config JSON (with hash), and f32 weight blobs."""
    entries = model.named_tensors()
    header = json.dumps(
        {"config": json.loads(model.config.to_json()), "config_hash": model.config.hash()},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            blob = name.encode()
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(tensor.data.astype("<f4").tobytes())


def load_model(path) -> QualityModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad model magic {raw[:8]!r}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unknown model version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 12)
    header = json.loads(raw[16 : 16 + hlen])
    config = ModelConfig.from_json(json.dumps(header["config"]))
    if config.hash() != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    offset = 16 + hlen
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + nlen].decode()
        offset += nlen
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after weight blobs")
    model = QualityModel(config)
    model.load_state_arrays(state)
    return model
