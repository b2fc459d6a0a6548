"""Supervised fitting of the input-sequence approximator.

Plain behavior cloning: minimize the mean squared error between predicted
and label input sequences in scaled space, with the scaling frozen from the
dataset manifest so inference cannot drift from training.  Training runs in
float64 on a fixed thread count with seeded shuffling, which makes reruns of
the same seed reproduce the exported weight file byte for byte.

The exported file follows the shared weight-file schema: tanh hidden layers,
linear output, the scaling block, `training_tol` set to the final validation
RMSE, and a 16-state probe block for load-time verification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import TrainingData, load_dataset, validation_split

DEFAULT_LR = 1e-3
DEFAULT_BATCH = 256
PROBE_SIZE = 16


@dataclass
class TrainResult:
    layers: list[tuple[np.ndarray, np.ndarray]]
    val_rmse: float
    train_losses: list[float]
    manifest: dict


def _build_net(sizes, generator):
    layers = []
    for i in range(len(sizes) - 1):
        lin = torch.nn.Linear(sizes[i], sizes[i + 1], dtype=torch.float64)
        torch.nn.init.xavier_uniform_(lin.weight, generator=generator)
        torch.nn.init.zeros_(lin.bias)
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(torch.nn.Tanh())
    return torch.nn.Sequential(*layers)


def train(dataset_path, arch=(50, 50), epochs=200, batch_size=DEFAULT_BATCH,
          lr=DEFAULT_LR, seed=0, log_every=0) -> TrainResult:
    """Fit an MLP to the dataset; deterministic for a fixed seed."""
    data = load_dataset(dataset_path)
    if data.states.shape[0] < 2:
        raise ValueError("dataset too small to split")
    in_off, in_sc, out_off, out_sc = data.scaling()
    X = (data.states - in_off) / in_sc
    Y = (data.labels - out_off) / out_sc
    n_in, n_out = X.shape[1], Y.shape[1]
    tr, va = validation_split(X.shape[0])

    torch.set_num_threads(1)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = _build_net([n_in, *arch, n_out], gen)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = torch.nn.MSELoss()

    Xt = torch.from_numpy(np.ascontiguousarray(X[tr]))
    Yt = torch.from_numpy(np.ascontiguousarray(Y[tr]))
    Xv = torch.from_numpy(np.ascontiguousarray(X[va]))
    Yv = torch.from_numpy(np.ascontiguousarray(Y[va]))

    n_train = Xt.shape[0]
    losses = []
    for epoch in range(epochs):
        perm = torch.randperm(n_train, generator=gen)
        total = 0.0
        for start in range(0, n_train, batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            loss = loss_fn(net(Xt[idx]), Yt[idx])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * idx.shape[0]
        losses.append(total / n_train)
        if not np.isfinite(losses[-1]):
            raise RuntimeError(f"training loss became non-finite at epoch {epoch}")
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{epochs}: train mse {losses[-1]:.3e}")

    with torch.no_grad():
        val_rmse = float(torch.sqrt(loss_fn(net(Xv), Yv)))
    layers = []
    for mod in net:
        if isinstance(mod, torch.nn.Linear):
            layers.append((mod.weight.detach().numpy().copy(),
                           mod.bias.detach().numpy().copy()))
    return TrainResult(layers=layers, val_rmse=val_rmse, train_losses=losses,
                       manifest=data.manifest)


def _forward(layers, scaling, x):
    """Reference forward pass matching the consumer: scale, tanh stack, clamp."""
    in_off, in_sc, out_off, out_sc = scaling
    h = (x - in_off) / in_sc
    for i, (w, b) in enumerate(layers):
        h = w @ h + b
        if i < len(layers) - 1:
            h = np.tanh(h)
    flat = h * out_sc + out_off
    return np.clip(flat, out_off - out_sc, out_off + out_sc)


def export_probe(layers, scaling, n_x, n=PROBE_SIZE, seed=0):
    """Seeded probe states and their clamped outputs for load-time checks."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    in_off, in_sc, _, _ = scaling
    inputs = rng.uniform(in_off - in_sc, in_off + in_sc, size=(n, n_x))
    outputs = np.stack([_forward(layers, scaling, xi) for xi in inputs])
    return inputs, outputs


def export_weights(result: TrainResult, path, probe_seed=0) -> None:
    """Write the shared weight-file format, probe block included."""
    man = result.manifest
    s = man["scaling"]
    scaling = (np.asarray(s["in_offset"]), np.asarray(s["in_scale"]),
               np.asarray(s["out_offset"]), np.asarray(s["out_scale"]))
    inputs, outputs = export_probe(result.layers, scaling, man["n_x"],
                                   seed=probe_seed)
    doc = {
        "meta": {
            "n_x": man["n_x"],
            "n_u": man["n_u"],
            "N": man["N"],
            "benchmark": man["benchmark"],
            "training_tol": result.val_rmse,
        },
        "scaling": {k: list(map(float, s[k])) for k in
                    ("in_offset", "in_scale", "out_offset", "out_scale")},
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in result.layers],
        "probe": {"inputs": inputs.tolist(), "outputs": outputs.tolist()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def recompute_val_rmse(weights_path, dataset_path) -> float:
    """Validation RMSE in scaled space, recomputed from the saved file."""
    with open(weights_path) as fh:
        doc = json.load(fh)
    layers = [(np.asarray(l["w"]), np.asarray(l["b"])) for l in doc["layers"]]
    s = doc["scaling"]
    in_off, in_sc = np.asarray(s["in_offset"]), np.asarray(s["in_scale"])
    out_off, out_sc = np.asarray(s["out_offset"]), np.asarray(s["out_scale"])
    data = load_dataset(dataset_path)
    _, va = validation_split(data.states.shape[0])
    X = (data.states[va] - in_off) / in_sc
    Y = (data.labels[va] - out_off) / out_sc
    preds = []
    for x in X:
        h = x
        for i, (w, b) in enumerate(layers):
            h = w @ h + b
            if i < len(layers) - 1:
                h = np.tanh(h)
        preds.append(h)
    err = np.stack(preds) - Y
    return float(np.sqrt(np.mean(err**2)))
