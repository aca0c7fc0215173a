"""The quality-evaluation network: feature-map encoder, text alignment,
regression head, joint training, and the regression metric suite.

One model instance handles one module variant.  The image branch runs
four conv/pool/relu layers and a fully connected projection to 512; the
per-view variant encodes each camera view separately and averages the
six view vectors ahead of the regression head while contrastive
alignment stays per view.  Texts and feature maps meet in a symmetric
InfoNCE loss over cosine logits with a learnable temperature; the head
regresses the quality score with a plain MSE objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import (
    ShapeError,
    Tensor,
    exp,
    index_select,
    logsumexp,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    sum_,
    transpose,
)
from .scenes import BFEM_SHAPE, IFEM_SHAPE
from .scoring import LabelDataset, RunArchive
from .text import NUM_CAMERAS, TextEncoder, default_vocabulary, render_template, tokenize
from .tensorio import read_checkpoint, write_checkpoint

HEAD_TOKENS = 8  # 512-d representation attended as 8 tokens of 64 dims


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-4
    tau_init: float = 0.07
    mix: float = 0.5
    seed: int = 0
    group_cells: int = 4
    min_lr: float = 0.0

    def __post_init__(self):
        if self.tau_init <= 0:
            raise ValueError(f"tau_init must be positive, got {self.tau_init}")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError(f"loss mix must lie in [0, 1], got {self.mix}")
        if self.epochs < 1 or self.batch_size < 1 or self.group_cells < 1:
            raise ValueError("epochs, batch_size and group_cells must be positive")


@dataclass
class RegressionReport:
    mse: float
    mae: float
    r_squared: float
    mape_percent: float
    mape_excluded: int
    count: int
    per_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mse": self.mse, "mae": self.mae, "r_squared": self.r_squared,
            "mape_percent": self.mape_percent, "mape_excluded": self.mape_excluded,
            "count": self.count, "per_config": self.per_config,
        }


# ------------------------------------------------------------------ losses


def _l2_rows(x: Tensor) -> Tensor:
    return x * sum_(x * x, axis=-1, keepdims=True) ** -0.5


def contrastive_loss(image_vecs: Tensor, text_vecs: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over cosine logits scaled by 1/tau.

    Row term: each image against all texts; column term: each text
    against all images.  Returns the batch mean of both cross entropies.
    """
    if image_vecs.shape != text_vecs.shape or image_vecs.ndim != 2:
        raise ShapeError(
            f"paired batches must share (S, D) shape: {image_vecs.shape} vs {text_vecs.shape}"
        )
    if not isinstance(tau, Tensor):
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        tau = Tensor(float(tau))
    elif float(tau.data) <= 0:
        raise ValueError(f"temperature must be positive, got {float(tau.data)}")
    S = image_vecs.shape[0]
    logits = matmul(_l2_rows(image_vecs), transpose(_l2_rows(text_vecs))) / tau
    diag = index_select(reshape(logits, (S * S,)), 0, np.arange(S) * S + np.arange(S))
    row = logsumexp(logits, axis=1) - diag
    col = logsumexp(logits, axis=0) - diag
    return mean(row) + mean(col)


def contrastive_loss_grouped(image_vecs: Tensor, unique_text_vecs: Tensor,
                             uid: np.ndarray, counts: np.ndarray, tau) -> Tensor:
    """contrastive_loss where duplicate texts are encoded once.

    `uid[i]` maps instance i to its row in `unique_text_vecs`; `counts[u]`
    is that text's multiplicity in the batch.  Exactly equal (up to float
    rounding) to contrastive_loss on the expanded batch.
    """
    if not isinstance(tau, Tensor):
        tau = Tensor(float(tau))
    S = image_vecs.shape[0]
    logits = matmul(_l2_rows(image_vecs), transpose(_l2_rows(unique_text_vecs))) / tau
    U = unique_text_vecs.shape[0]
    diag = index_select(reshape(logits, (S * U,)), 0, np.arange(S) * U + uid)
    row = logsumexp(logits + Tensor(np.log(counts)), axis=1) - diag
    col = index_select(logsumexp(logits, axis=0), 0, uid) - diag
    return mean(row) + mean(col)


def regression_loss(preds: Tensor, labels) -> Tensor:
    """Mean squared error between predictions and target scores."""
    labels = labels if isinstance(labels, Tensor) else Tensor(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f"prediction/label shapes differ: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("empty batch")
    d = preds - labels
    return mean(d * d)


# ---------------------------------------------------------------- metrics


def regression_metrics(labels: np.ndarray, preds: np.ndarray) -> dict:
    """MSE, MAE, R^2 and MAPE (percent, zero labels excluded with a count)."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"need matching non-empty vectors, got {y.shape} and {p.shape}")
    err = y - p
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    ss_res = float(np.sum(err * err))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    nz = y != 0.0
    excluded = int((~nz).sum())
    mape = float(np.mean(np.abs(err[nz] / y[nz])) * 100.0) if nz.any() else float("nan")
    return {"mse": mse, "mae": mae, "r_squared": r2, "mape_percent": mape,
            "mape_excluded": excluded, "count": int(y.size)}


# ------------------------------------------------------------ architecture


class FeatureEncoder:
    """Four conv/pool/relu layers and a fully connected map to 512."""

    def __init__(self, variant: str, seed: int = 0, out_dim: int = 512):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFE]))
        self.variant = variant
        if variant == "IFEM":
            self.input_shape = IFEM_SHAPE          # (V, C, H, W) per sample
            plan = [
                dict(cin=32, cout=8, k=(3, 5), stride=(2, 2), pad=(1, 2), pool=(2, 2)),
                dict(cin=8, cout=16, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(2, 1)),
                dict(cin=16, cout=32, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(1, 3)),
                dict(cin=32, cout=32, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(1, 1)),
            ]
        elif variant == "BFEM":
            self.input_shape = BFEM_SHAPE          # (C, H, W) per sample
            plan = [
                dict(cin=32, cout=8, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(2, 2)),
                dict(cin=8, cout=16, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(2, 2)),
                dict(cin=16, cout=32, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(2, 2)),
                dict(cin=32, cout=32, k=(3, 3), stride=(1, 1), pad=(1, 1), pool=(2, 2)),
            ]
        else:
            raise ValueError(f"unknown variant {variant!r}")
        self.plan = plan
        self.layers = []
        for spec in plan:
            kh, kw = spec["k"]
            fan_in = spec["cin"] * kh * kw
            w = nn.kaiming_uniform((spec["cout"], spec["cin"], kh, kw), fan_in, rng)
            b = nn.zeros_init(spec["cout"])
            self.layers.append((w, b))
        self.flat_dim = self._probe_flat_dim()
        self.fc_w = nn.kaiming_uniform((out_dim, self.flat_dim), self.flat_dim, rng)
        self.fc_b = nn.zeros_init(out_dim)

    def _probe_flat_dim(self) -> int:
        shape = self.input_shape[-3:]
        with no_grad():
            x = Tensor(np.zeros((1,) + shape))
            x = self._conv_stack(x)
        return int(np.prod(x.shape[1:]))

    def _conv_stack(self, x: Tensor) -> Tensor:
        for spec, (w, b) in zip(self.plan, self.layers):
            x = nn.conv2d(x, w, b, padding=spec["pad"], stride=spec["stride"])
            if spec["pool"] != (1, 1):
                x = nn.maxpool2d(x, window=spec["pool"])
            x = relu(x)
        return x

    def encode(self, feats: np.ndarray) -> Tensor:
        """(B,C,H,W) [BFEM] or (B,V,C,H,W) [IFEM] -> (B,512) or (B,V,512)."""
        arr = np.asarray(feats, dtype=np.float64)
        per_view = self.variant == "IFEM"
        want = self.input_shape if per_view else self.input_shape
        if arr.shape[1:] != want:
            raise ShapeError(
                f"{self.variant} encoder expects (B,{','.join(map(str, want))}), got {arr.shape}"
            )
        B = arr.shape[0]
        if per_view:
            V = arr.shape[1]
            x = Tensor(arr.reshape((B * V,) + arr.shape[2:]))
        else:
            x = Tensor(arr)
        x = self._conv_stack(x)
        x = reshape(x, (x.shape[0], self.flat_dim))
        x = nn.linear(x, self.fc_w, self.fc_b)
        if per_view:
            x = reshape(x, (B, V, x.shape[-1]))
        return x

    def named_parameters(self) -> list:
        named = []
        for i, (w, b) in enumerate(self.layers):
            named.extend([(f"conv{i}.w", w), (f"conv{i}.b", b)])
        named.extend([("fc.w", self.fc_w), ("fc.b", self.fc_b)])
        return named


class RegressionHead:
    """One self-attention block over the tokenized 512-d vector, then a scalar."""

    def __init__(self, seed: int = 0, dim: int = 512, tokens: int = HEAD_TOKENS,
                 heads: int = 2, ff_dim: int = 128):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
        self.tokens = tokens
        self.width = dim // tokens
        w = self.width
        self.heads = heads
        self.ln1_g = Tensor(np.ones(w), requires_grad=True)
        self.ln1_b = nn.zeros_init(w)
        self.qkv_w = nn.kaiming_uniform((3 * w, w), w, rng)
        self.qkv_b = nn.zeros_init(3 * w)
        self.attn_w = nn.kaiming_uniform((w, w), w, rng)
        self.attn_b = nn.zeros_init(w)
        self.ln2_g = Tensor(np.ones(w), requires_grad=True)
        self.ln2_b = nn.zeros_init(w)
        self.ff1_w = nn.kaiming_uniform((ff_dim, w), w, rng)
        self.ff1_b = nn.zeros_init(ff_dim)
        self.ff2_w = nn.kaiming_uniform((w, ff_dim), ff_dim, rng)
        self.ff2_b = nn.zeros_init(w)
        self.out_w = nn.kaiming_uniform((1, dim), dim, rng)
        self.out_b = nn.zeros_init(1)

    def predict(self, vecs: Tensor) -> Tensor:
        """(B, 512) -> (B,) scalar predictions."""
        if vecs.ndim != 2 or vecs.shape[1] != self.tokens * self.width:
            raise ShapeError(f"head expects (B, {self.tokens * self.width}), got {vecs.shape}")
        B = vecs.shape[0]
        x = reshape(vecs, (B, self.tokens, self.width))
        W = self.width
        h = nn.layer_norm(x, self.ln1_g, self.ln1_b)
        qkv = nn.linear(h, self.qkv_w, self.qkv_b)
        q = index_select(qkv, 2, np.arange(0, W))
        k = index_select(qkv, 2, np.arange(W, 2 * W))
        v = index_select(qkv, 2, np.arange(2 * W, 3 * W))
        x = x + nn.attention_block(q, k, v, self.heads, self.attn_w, self.attn_b)
        h = nn.layer_norm(x, self.ln2_g, self.ln2_b)
        x = x + nn.linear(relu(nn.linear(h, self.ff1_w, self.ff1_b)), self.ff2_w, self.ff2_b)
        flat = reshape(x, (B, self.tokens * self.width))
        return reshape(nn.linear(flat, self.out_w, self.out_b), (B,))

    def named_parameters(self) -> list:
        keys = ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "attn_w", "attn_b",
                "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b", "out_w", "out_b")
        return [(k, getattr(self, k)) for k in keys]


class FmqeModel:
    """Feature encoder + text encoder + regression head for one module variant."""

    def __init__(self, variant: str, seed: int = 0, tau_init: float = 0.07,
                 text_max_len: int = 64):
        self.variant = variant
        self.seed = seed
        self.text_max_len = text_max_len
        self.feature_encoder = FeatureEncoder(variant, seed=seed)
        self.text_encoder = TextEncoder(default_vocabulary().size, text_max_len, seed=seed)
        self.head = RegressionHead(seed=seed)
        self.log_tau = Tensor(np.array(math.log(tau_init)), requires_grad=True)

    def tau(self) -> Tensor:
        return exp(self.log_tau)

    def sample_vectors(self, feats: np.ndarray) -> Tensor:
        """Per-sample 512-d vectors (per-view outputs averaged for IFEM)."""
        enc = self.feature_encoder.encode(feats)
        if enc.ndim == 3:
            enc = mean(enc, axis=1)
        return enc

    def view_vectors(self, feats: np.ndarray) -> Tensor:
        """(B*V, 512) per-view vectors for the per-view variant."""
        enc = self.feature_encoder.encode(feats)
        if enc.ndim != 3:
            raise ShapeError(f"{self.variant} has no per-view output")
        B, V, D = enc.shape
        return reshape(enc, (B * V, D))

    def predict_batch(self, feats: np.ndarray) -> Tensor:
        return self.head.predict(self.sample_vectors(feats))

    def predict_fmqs(self, feature_map: np.ndarray) -> float:
        """Quality prediction for a single feature map (inference only)."""
        with no_grad():
            return float(self.predict_batch(np.asarray(feature_map)[None]).data[0])

    def named_parameters(self) -> list:
        named = [(f"feature.{k}", p) for k, p in self.feature_encoder.named_parameters()]
        named += [(f"text.{k}", p) for k, p in self.text_encoder.named_parameters()]
        named += [(f"head.{k}", p) for k, p in self.head.named_parameters()]
        named.append(("log_tau", self.log_tau))
        return named

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> list:
        return [(k, p.data.copy()) for k, p in self.named_parameters()]

    def load_state_arrays(self, named: list):
        mine = dict(self.named_parameters())
        for k, arr in named:
            if k not in mine:
                raise KeyError(f"unexpected parameter {k!r}")
            if mine[k].data.shape != np.asarray(arr).shape:
                raise ShapeError(f"parameter {k}: shape {np.asarray(arr).shape}, "
                                 f"expected {mine[k].data.shape}")
            mine[k].data = np.asarray(arr, dtype=np.float64).copy()

    def save(self, path, meta: dict | None = None):
        info = {"seed": self.seed, "text_max_len": self.text_max_len}
        info.update(meta or {})
        write_checkpoint(path, self.variant, self.named_parameters(), info)

    @staticmethod
    def load(path) -> "FmqeModel":
        variant, params, meta = read_checkpoint(path)
        model = FmqeModel(variant, seed=meta.get("seed", 0),
                          text_max_len=meta.get("text_max_len", 64))
        model.load_state_arrays(params)
        return model


# ----------------------------------------------------------- training data


@dataclass
class FmqsTrainData:
    """One module variant's labels, features, and pre-tokenized texts."""

    module: str
    features: np.ndarray          # (N, M, S, ...)
    config_names: list
    train_items: np.ndarray       # structured columns: i, j, k
    train_labels: np.ndarray
    test_items: np.ndarray
    test_labels: np.ndarray
    texts: list                   # per sample: [(string, TokenizedText)] len 1 or 6


def build_train_data(archive: RunArchive, dataset: LabelDataset, module: str) -> FmqsTrainData:
    from .scenes import scene_records

    feats = archive.module_stack(module)
    texts = []
    for scene in archive.scenes:
        scene_rec, cams = scene_records(scene)
        if module == "BFEM":
            s = render_template(scene_rec)
            texts.append([(s, tokenize(s, max_len=64))])
        else:
            entry = []
            for rec in cams:
                s = render_template(rec)
                entry.append((s, tokenize(s, max_len=64)))
            texts.append(entry)

    def pack(labels):
        items = np.array([[l.config, l.stage, l.sample] for l in labels], dtype=np.int64)
        y = np.array([l.fmqs for l in labels])
        return items, y

    train_items, train_y = pack(dataset.for_module(module, "train"))
    test_items, test_y = pack(dataset.for_module(module, "test"))
    return FmqsTrainData(module, feats, list(archive.config_names),
                         train_items, train_y, test_items, test_y, texts)


def _grouped_batches(items: np.ndarray, group: int, batch_size: int,
                     rng: np.random.Generator) -> list:
    """Index batches where each sample contributes `group` cells at a time.

    Grouping keeps the number of distinct texts per batch small; the
    grouped contrastive loss stays exact under duplication.
    """
    by_sample = {}
    for idx, (i, j, k) in enumerate(items):
        by_sample.setdefault(int(k), []).append(idx)
    chunks = []
    for k in sorted(by_sample):
        idxs = np.array(by_sample[k])
        rng.shuffle(idxs)
        for off in range(0, len(idxs), group):
            chunks.append(idxs[off : off + group])
    order = rng.permutation(len(chunks))
    batches = []
    cur = []
    size = 0
    for ci in order:
        cur.append(chunks[ci])
        size += len(chunks[ci])
        if size + group > batch_size:
            batches.append(np.concatenate(cur))
            cur, size = [], 0
    if cur:
        batches.append(np.concatenate(cur))
    return batches


def _batch_texts(data: FmqsTrainData, samples: np.ndarray):
    """Unique text list + per-instance uid/counts for one batch."""
    uid = []
    uniq = {}
    toks = []
    for k in samples:
        for s, tok in data.texts[int(k)]:
            if s not in uniq:
                uniq[s] = len(toks)
                toks.append(tok)
            uid.append(uniq[s])
    uid = np.array(uid, dtype=np.intp)
    counts = np.bincount(uid, minlength=len(toks)).astype(np.float64)
    return toks, uid, counts


def _forward_batch(model: FmqeModel, data: FmqsTrainData, feats: np.ndarray,
                   samples: np.ndarray, labels: np.ndarray, mix: float):
    """Combined loss plus the detached component values for logging."""
    enc = model.feature_encoder.encode(feats)
    if enc.ndim == 3:  # per-view variant
        B, V, D = enc.shape
        img_vecs = reshape(enc, (B * V, D))
        pooled = mean(enc, axis=1)
    else:
        img_vecs = enc
        pooled = enc
    preds = model.head.predict(pooled)
    reg = regression_loss(preds, Tensor(labels))

    toks, uid, counts = _batch_texts(data, samples)
    txt_vecs = model.text_encoder.encode_batch(toks)
    cont = contrastive_loss_grouped(img_vecs, txt_vecs, uid, counts, model.tau())
    total = cont * mix + reg * (1.0 - mix)
    return total, float(cont.data), float(reg.data)


def _eval_mse(model: FmqeModel, data: FmqsTrainData, batch_size: int) -> float:
    if len(data.test_labels) == 0:
        return float("nan")
    preds = predict_dataset(model, data, "test", batch_size)
    err = preds - data.test_labels
    return float(np.mean(err * err))


def predict_dataset(model: FmqeModel, data: FmqsTrainData, split: str,
                    batch_size: int = 64) -> np.ndarray:
    items = data.train_items if split == "train" else data.test_items
    out = np.zeros(len(items))
    with no_grad():
        for off in range(0, len(items), batch_size):
            chunk = items[off : off + batch_size]
            feats = data.features[chunk[:, 0], chunk[:, 1], chunk[:, 2]]
            out[off : off + len(chunk)] = model.predict_batch(feats).data
    return out


def train_fmqe(data: FmqsTrainData, cfg: TrainRunConfig) -> tuple:
    """Train one variant; returns (model at best validation MSE, epoch log)."""
    if len(data.train_labels) == 0:
        raise ValueError("empty training split")
    model = FmqeModel(data.module, seed=cfg.seed, tau_init=cfg.tau_init)
    # start the scalar head at the training label mean
    model.head.out_b.data[:] = float(np.mean(data.train_labels))

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    steps_per_epoch = max(1, math.ceil(len(data.train_labels) / cfg.batch_size))
    state = nn.OptimizerState(model.parameters(), base_lr=cfg.base_lr,
                              total_steps=cfg.epochs * steps_per_epoch,
                              min_lr=cfg.min_lr)
    log = []
    best = (float("inf"), model.state_arrays())
    for epoch in range(cfg.epochs):
        lr_at_start = state.current_lr()
        batches = _grouped_batches(data.train_items, cfg.group_cells, cfg.batch_size, rng)
        cont_sum = reg_sum = 0.0
        for bidx in batches:
            chunk = data.train_items[bidx]
            feats = data.features[chunk[:, 0], chunk[:, 1], chunk[:, 2]]
            labels = data.train_labels[bidx]
            total, cont_v, reg_v = _forward_batch(model, data, feats, chunk[:, 2],
                                                  labels, cfg.mix)
            if not np.isfinite(total.data):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}: cont={cont_v}, reg={reg_v}"
                )
            state.zero_grad()
            total.backward()
            nn.adam_step(state)
            cont_sum += cont_v * len(bidx)
            reg_sum += reg_v * len(bidx)
        val_mse = _eval_mse(model, data, cfg.batch_size)
        n = len(data.train_labels)
        entry = {"epoch": epoch, "lr": lr_at_start,
                 "train_cont": cont_sum / n, "train_reg": reg_sum / n,
                 "val_mse": val_mse}
        log.append(entry)
        if val_mse < best[0]:
            best = (val_mse, model.state_arrays())
    model.load_state_arrays(best[1])
    return model, log


def evaluate_regression(model: FmqeModel, data: FmqsTrainData,
                        split: str = "test", batch_size: int = 64) -> RegressionReport:
    """Metric suite on one split, with a per-configuration breakdown."""
    items = data.train_items if split == "train" else data.test_items
    labels = data.train_labels if split == "train" else data.test_labels
    if len(labels) == 0:
        raise ValueError(f"empty {split} split")
    preds = predict_dataset(model, data, split, batch_size)
    overall = regression_metrics(labels, preds)
    per_config = {}
    for i, name in enumerate(data.config_names):
        mask = items[:, 0] == i
        if mask.any():
            per_config[name] = regression_metrics(labels[mask], preds[mask])
    return RegressionReport(per_config=per_config, **overall)


def alignment_gap(model: FmqeModel, data: FmqsTrainData, split: str = "test",
                  batch_size: int = 64) -> dict:
    """Mean matched-pair minus mean mismatched-pair cosine on one split.

    Image vectors are per-item sample vectors (view-averaged for the
    per-view variant); text vectors are per-sample (camera texts
    averaged).  Matched pairs share the sample index.
    """
    items = data.train_items if split == "train" else data.test_items
    if len(items) == 0:
        raise ValueError(f"empty {split} split")
    sample_ids = sorted({int(k) for k in items[:, 2]})
    with no_grad():
        tvecs = []
        for k in sample_ids:
            toks = [tok for _, tok in data.texts[k]]
            enc = model.text_encoder.encode_batch(toks).data
            tvecs.append(enc.mean(axis=0))
        tmat = np.stack(tvecs)
        ivecs = np.zeros((len(items), tmat.shape[1]))
        for off in range(0, len(items), batch_size):
            chunk = items[off : off + batch_size]
            feats = data.features[chunk[:, 0], chunk[:, 1], chunk[:, 2]]
            ivecs[off : off + len(chunk)] = model.sample_vectors(feats).data
    tmat = tmat / np.linalg.norm(tmat, axis=1, keepdims=True)
    ivecs = ivecs / np.linalg.norm(ivecs, axis=1, keepdims=True)
    sims = ivecs @ tmat.T  # (items, samples)
    col_of = {k: c for c, k in enumerate(sample_ids)}
    matched_mask = np.zeros_like(sims, dtype=bool)
    for r, (_, _, k) in enumerate(items):
        matched_mask[r, col_of[int(k)]] = True
    matched = float(sims[matched_mask].mean())
    mismatched = float(sims[~matched_mask].mean()) if (~matched_mask).any() else float("nan")
    return {"matched": matched, "mismatched": mismatched, "gap": matched - mismatched}
