"""Losses, Adam, the training loop with best-on-validation checkpointing,
evaluation metrics and the finite-difference gradient-check harness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

BCE_EPS = 1e-7


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. pred."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = pred.size
    return float((diff * diff).mean()), 2.0 * diff / n


def loss_bce(pred: np.ndarray, target: np.ndarray):
    """Binary cross-entropy with predictions clipped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    n = pred.size
    loss = float(-(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean())
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)
    grad = np.where(inside, (p - target) / (p * (1.0 - p) * n), 0.0)
    return loss, grad.astype(pred.dtype, copy=False)


LOSSES = {"mse": loss_mse, "bce": loss_bce}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update, in place. Parameters without a gradient see g = 0."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    loss: str = "mse"
    learning_rate: float = 1e-4
    batch_size: int = 2
    max_epochs: int = 10
    dropout_rate: float = 0.5
    seed: int = 0
    checkpoint_path: str | None = None

    @classmethod
    def precipitation(cls, **kwargs) -> "TrainConfig":
        return cls(loss="mse", learning_rate=1e-4, batch_size=2,
                   dropout_rate=0.5, **kwargs)

    @classmethod
    def cloud(cls, **kwargs) -> "TrainConfig":
        return cls(loss="bce", learning_rate=1e-3, batch_size=8,
                   dropout_rate=0.5, **kwargs)


@dataclass
class TrainResult:
    history: list            # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float


def _mean_loss(model, sample_set, loss_fn) -> float:
    total = 0.0
    for x, t in zip(sample_set.inputs, sample_set.targets):
        loss, _ = loss_fn(model.forward(x, train=False), t)
        total += loss
    return total / len(sample_set.inputs)


def train(model, train_set, val_set, cfg: TrainConfig) -> TrainResult:
    """Seeded epoch loop over shuffled mini-batches.

    Per-batch gradients are averaged, validation loss is computed after each
    epoch and a checkpoint is written whenever it improves.
    """
    if len(train_set.inputs) == 0 or len(val_set.inputs) == 0:
        raise ValueError("train and validation sets must be nonempty")
    loss_fn = LOSSES[cfg.loss]
    if not model.initialized:
        model.initialize(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = model.named_params()
    state = AdamState.for_params(params)
    n = len(train_set.inputs)
    history = []
    best_epoch, best_val = -1, np.inf
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grads()
            for i in batch:
                x = train_set.inputs[i]
                t = train_set.targets[i]
                if x.shape != model.input_shape() or t.shape != model.out_shape():
                    raise ValueError(
                        f"sample shapes {x.shape}/{t.shape} do not match model")
                y = model.forward(x, train=True, rng=rng)
                loss, grad = loss_fn(y, t)
                epoch_loss += loss
                model.backward(grad / len(batch))
            adam_step(params, model.named_grads(), state, cfg.learning_rate)
        train_loss = epoch_loss / n
        val_loss = _mean_loss(model, val_set, loss_fn)
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_epoch, best_val = epoch, val_loss
            if cfg.checkpoint_path is not None:
                model.save(cfg.checkpoint_path)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_loss=best_val)


def save_history_csv(history, path) -> None:
    """History file: `epoch,train_loss,val_loss`, one row per epoch."""
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train_loss, val_loss in history:
            writer.writerow([epoch, repr(float(train_loss)), repr(float(val_loss))])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def binarize(x: np.ndarray, threshold: float) -> np.ndarray:
    """Values at or above the threshold become 1, the rest 0."""
    return (x >= threshold).astype(x.dtype)


@dataclass
class MetricsReport:
    mse: float
    mse_binarized: float
    accuracy: float
    precision: float
    recall: float
    threshold: float
    n_pixels: int
    denormalization_factor: float


def _ratio(num: int, den: int, other_den: int) -> float:
    # Undefined-denominator convention: 1 when both confusion denominators
    # are empty (no positives anywhere), else 0.
    if den == 0:
        return 1.0 if other_den == 0 else 0.0
    return num / den


def evaluate(predictor, test_set, threshold: float,
             denorm_factor: float = 1.0) -> MetricsReport:
    """MSE over denormalized data plus pixelwise binary metrics.

    `predictor` is a Model or any callable mapping input to prediction.
    Confusion counts aggregate over all pixels of all samples.
    """
    if len(test_set.inputs) == 0:
        raise ValueError("test set must be nonempty")
    predict = predictor.predict if hasattr(predictor, "predict") else predictor
    sq_err = 0.0
    sq_err_bin = 0.0
    tp = fp = fn = tn = 0
    n_pixels = 0
    for x, t in zip(test_set.inputs, test_set.targets):
        pred = predict(x)
        diff = (pred - t) * denorm_factor
        sq_err += float((diff * diff).sum())
        pb = pred >= threshold
        tb = t >= threshold
        tp += int(np.count_nonzero(pb & tb))
        fp += int(np.count_nonzero(pb & ~tb))
        fn += int(np.count_nonzero(~pb & tb))
        tn += int(np.count_nonzero(~pb & ~tb))
        bdiff = pb.astype(np.float64) - tb.astype(np.float64)
        sq_err_bin += float((bdiff * bdiff).sum())
        n_pixels += pred.size
    return MetricsReport(
        mse=sq_err / n_pixels,
        mse_binarized=sq_err_bin / n_pixels,
        accuracy=(tp + tn) / n_pixels,
        precision=_ratio(tp, tp + fp, tp + fn),
        recall=_ratio(tp, tp + fn, tp + fp),
        threshold=threshold,
        n_pixels=n_pixels,
        denormalization_factor=denorm_factor,
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: str
    tolerance: float
    per_param: dict = field(default_factory=dict)


def grad_check(target, in_shape=None, x=None, tol=1e-4, step=1e-6,
               seed=0, max_input_coords=64, max_param_coords=200) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `target` is a Layer (initialized here in f64 if needed) or an
    initialized Model in f64. The scalar objective is sum(output * r) for a
    fixed random r. Relative error uses max(|a|, |fd|, 1e-3 * grad_rms) as
    the denominator so near-zero coordinates do not amplify rounding noise.
    """
    rng = np.random.default_rng(seed)
    is_model = hasattr(target, "root")
    root = target.root if is_model else target
    if is_model:
        if target.dtype != np.float64:
            raise ValueError("gradient checks require an f64-initialized model")
    else:
        needs = any(layer.param_shapes() and not layer.params
                    for _, layer in root.walk())
        if needs:
            init_rng = np.random.default_rng(seed + 1)
            for _, layer in root.walk():
                layer.init_params(init_rng, dtype=np.float64)
    if x is None:
        if in_shape is None:
            in_shape = target.input_shape() if is_model else None
        if in_shape is None:
            raise ValueError("provide either x or in_shape")
        x = rng.standard_normal(in_shape)
    x = np.asarray(x, dtype=np.float64)

    def fwd(inp):
        return root.forward(inp, train=False, rng=None)

    y = fwd(x)
    r = rng.standard_normal(y.shape)

    root.zero_grads()
    gx = root.backward(r.copy())
    grads = {}
    for lname, layer in root.walk():
        for pname, g in layer.grads.items():
            grads[f"{lname}.{pname}" if lname else pname] = g
    params = {}
    for lname, layer in root.walk():
        for pname, p in layer.params.items():
            params[f"{lname}.{pname}" if lname else pname] = p

    def objective():
        return float((fwd(x) * r).sum())

    # pooled scale keeps the relative error meaningful at tiny gradients
    pool = [np.abs(gx).ravel()] + [np.abs(g).ravel() for g in grads.values()]
    g_rms = float(np.sqrt(np.mean(np.concatenate(pool) ** 2))) if pool else 0.0
    floor = max(1e-3 * g_rms, 1e-12)

    worst_err, worst_name = 0.0, "none"
    per_param = {}

    def check_coords(label, arr, analytic, idxs):
        nonlocal worst_err, worst_name
        local_max = 0.0
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + step
            splus = objective()
            flat[idx] = orig - step
            sminus = objective()
            flat[idx] = orig
            fd = (splus - sminus) / (2.0 * step)
            a = aflat[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            if rel > local_max:
                local_max = rel
            if rel > worst_err:
                worst_err = rel
                worst_name = f"{label}[{idx}]"
        return local_max

    n_in = min(max_input_coords, x.size)
    in_idx = rng.choice(x.size, size=n_in, replace=False)
    per_param["input"] = check_coords("input", x, gx, in_idx)

    names = list(params.keys())
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    if total:
        n_coords = min(max_param_coords, total)
        flat_choice = rng.choice(total, size=n_coords, replace=False)
        bounds = np.cumsum(sizes)
        for pos in sorted(flat_choice):
            pi = int(np.searchsorted(bounds, pos, side="right"))
            name = names[pi]
            local = pos - (bounds[pi] - sizes[pi])
            analytic = grads.get(name)
            if analytic is None:
                analytic = np.zeros_like(params[name])
            err = check_coords(f"param:{name}", params[name], analytic, [int(local)])
            per_param[name] = max(per_param.get(name, 0.0), err)

    return GradCheckReport(passed=worst_err < tol, max_rel_error=worst_err,
                           worst=worst_name, tolerance=tol, per_param=per_param)
