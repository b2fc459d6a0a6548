"""MLP approximator: a state in, a full N-step input sequence out.

The network is a plain feedforward stack with tanh hidden activations and a
linear output layer.  Scaling is part of the inference contract and lives in
the weight file: states are normalized to [-1, 1] against the sampling box,
outputs are denormalized from [-1, 1] against the input box, and raw outputs
are clamped element-wise into the input box so the returned sequence always
satisfies the input constraint exactly.

Weight file layout (JSON, numbers as decimal doubles, matrices row-major)::

    {
      "meta":    {"n_x", "n_u", "N", "benchmark", "training_tol"},
      "scaling": {"in_offset", "in_scale", "out_offset", "out_scale"},
      "layers":  [{"w": [[...]], "b": [...]}, ...],
      "probe":   {"inputs": [[...] x 16], "outputs": [[...] x 16]}
    }

The probe block pins inference behavior across implementations: load_policy
re-evaluates the stored probe states and rejects the file if outputs drift
beyond relative 1e-6.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "WeightFileError",
    "MlpPolicy",
    "ConstantPolicy",
    "infer",
    "attach_probe",
    "save_policy",
    "load_policy",
]

PROBE_SIZE = 16
PROBE_RTOL = 1e-6


class WeightFileError(ValueError):
    """A weight file violates the schema; the message names the field."""


@dataclass
class MlpPolicy:
    """Weights, scaling, and shape metadata for one trained approximator."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    in_offset: np.ndarray
    in_scale: np.ndarray
    out_offset: np.ndarray
    out_scale: np.ndarray
    n_x: int
    n_u: int
    N: int
    benchmark: str = ""
    training_tol: float = float("nan")
    probe_inputs: Optional[np.ndarray] = None
    probe_outputs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.layers = [
            (np.atleast_2d(np.asarray(w, dtype=float)), np.asarray(b, dtype=float))
            for w, b in self.layers
        ]
        for name in ("in_offset", "in_scale", "out_offset", "out_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        width = self.n_x
        for i, (w, b) in enumerate(self.layers):
            if w.shape[1] != width:
                raise WeightFileError(
                    f"layers[{i}].w: input width {w.shape[1]} does not chain "
                    f"with previous width {width}"
                )
            if b.shape != (w.shape[0],):
                raise WeightFileError(f"layers[{i}].b: length {b.shape} != rows of w")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise WeightFileError(f"layers[{i}]: parameters must be finite")
            width = w.shape[0]
        if width != self.n_u * self.N:
            raise WeightFileError(
                f"last layer width {width} != n_u * N = {self.n_u * self.N}"
            )
        if self.in_offset.shape != (self.n_x,) or self.in_scale.shape != (self.n_x,):
            raise WeightFileError("scaling.in_offset/in_scale: length must equal n_x")
        if self.out_offset.shape != (self.n_u * self.N,) or self.out_scale.shape != (
            self.n_u * self.N,
        ):
            raise WeightFileError("scaling.out_offset/out_scale: length must equal n_u*N")
        if np.any(self.in_scale <= 0.0) or np.any(self.out_scale <= 0.0):
            raise WeightFileError("scaling: scales must be positive")

    @property
    def clamp_lo(self) -> np.ndarray:
        return self.out_offset - self.out_scale

    @property
    def clamp_hi(self) -> np.ndarray:
        return self.out_offset + self.out_scale

    def propose(self, x: np.ndarray) -> np.ndarray:
        return infer(self, x)


def infer(policy: MlpPolicy, x: np.ndarray) -> np.ndarray:
    """Evaluate the network at one state; returns an (N, n_u) input sequence.

    The flat output is interpreted row-major, first stage first, and clamped
    into the input box.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (policy.n_x,):
        raise ValueError(f"state must have shape ({policy.n_x},), got {x.shape}")
    h = (x - policy.in_offset) / policy.in_scale
    last = len(policy.layers) - 1
    for i, (w, b) in enumerate(policy.layers):
        h = w @ h + b
        if i != last:
            h = np.tanh(h)
    flat = h * policy.out_scale + policy.out_offset
    if not np.all(np.isfinite(flat)):
        raise ValueError("network produced a non-finite output")
    flat = np.clip(flat, policy.clamp_lo, policy.clamp_hi)
    return flat.reshape(policy.N, policy.n_u)


@dataclass
class ConstantPolicy:
    """Fixture policy proposing the same raw sequence at every state.

    The raw values pass through the same clamp as network outputs, so values
    outside the input box land on its faces.  Useful as an adversarial
    stand-in for an approximator that has gone wrong.
    """

    raw: np.ndarray
    clamp_lo: np.ndarray
    clamp_hi: np.ndarray

    def propose(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.raw, self.clamp_lo, self.clamp_hi)


def default_scaling(model, N: int):
    """Box-based scaling blocks for a model: state box in, input box out."""
    in_offset = 0.5 * (model.sample_lo + model.sample_hi)
    in_scale = 0.5 * (model.sample_hi - model.sample_lo)
    out_offset = np.tile(0.5 * (model.u_lo + model.u_hi), N)
    out_scale = np.tile(0.5 * (model.u_hi - model.u_lo), N)
    return in_offset, in_scale, out_offset, out_scale


# raw constant targets (original input coordinates) for the fixture policies;
# "adversarial" picks the input corner that drives each benchmark at a state
# or terminal constraint, deliberately overshooting the box so the clamp, not
# good behavior, produces the applied value
def _fixture_target(model, kind: str) -> np.ndarray:
    if kind == "hover":
        return np.tile(model.u_e, model.N)
    if kind != "adversarial":
        raise ValueError(f"unknown fixture kind {kind!r}")
    if model.name == "stir_tank":
        target = np.array([model.u_hi[0] + 1.0])
    elif model.name == "quadcopter":
        # full tilt toward the wall, hover thrust held
        target = np.array([model.u_hi[0] + 1.0, 0.0, model.u_e[2]])
    elif model.name == "chain_mass":
        # drag the hand through the wall at y = -0.1
        target = np.array([0.0, model.u_lo[1] - 1.0, 0.0])
    else:
        target = model.u_hi + 1.0
    return np.tile(target, model.N)


def make_fixture_policy(model, kind: str, probe_seed: int = 0) -> MlpPolicy:
    """Constant-output policy encoded as a valid single-layer weight file."""
    in_offset, in_scale, out_offset, out_scale = default_scaling(model, model.N)
    target = _fixture_target(model, kind)
    bias = (target - out_offset) / out_scale
    n_out = model.n_u * model.N
    pol = MlpPolicy(
        layers=[(np.zeros((n_out, model.n_x)), bias)],
        in_offset=in_offset,
        in_scale=in_scale,
        out_offset=out_offset,
        out_scale=out_scale,
        n_x=model.n_x,
        n_u=model.n_u,
        N=model.N,
        benchmark=model.name,
        training_tol=0.0,
    )
    return attach_probe(pol, seed=probe_seed)


def attach_probe(policy: MlpPolicy, seed: int = 0) -> MlpPolicy:
    """Fill the probe block: 16 seeded states and their inference outputs."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    lo = policy.in_offset - policy.in_scale
    hi = policy.in_offset + policy.in_scale
    inputs = rng.uniform(lo, hi, size=(PROBE_SIZE, policy.n_x))
    outputs = np.stack([infer(policy, xi).ravel() for xi in inputs])
    policy.probe_inputs = inputs
    policy.probe_outputs = outputs
    return policy


def save_policy(policy: MlpPolicy, path) -> None:
    """Write the weight file; requires the probe block to be present."""
    if policy.probe_inputs is None or policy.probe_outputs is None:
        raise WeightFileError("probe: block is mandatory; call attach_probe first")
    doc = {
        "meta": {
            "n_x": policy.n_x,
            "n_u": policy.n_u,
            "N": policy.N,
            "benchmark": policy.benchmark,
            "training_tol": policy.training_tol,
        },
        "scaling": {
            "in_offset": policy.in_offset.tolist(),
            "in_scale": policy.in_scale.tolist(),
            "out_offset": policy.out_offset.tolist(),
            "out_scale": policy.out_scale.tolist(),
        },
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in policy.layers],
        "probe": {
            "inputs": policy.probe_inputs.tolist(),
            "outputs": policy.probe_outputs.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def _require(doc, path_parts):
    node = doc
    trail = []
    for part in path_parts:
        trail.append(str(part))
        if not isinstance(node, dict) or part not in node:
            raise WeightFileError(f"{'.'.join(trail)}: missing required field")
        node = node[part]
    return node


def load_policy(path) -> MlpPolicy:
    """Read and validate a weight file, verifying the stored probe outputs."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise WeightFileError(f"not valid JSON: {err}") from None
    meta = _require(doc, ["meta"])
    scaling = _require(doc, ["scaling"])
    layers_doc = _require(doc, ["layers"])
    probe = _require(doc, ["probe"])
    for key in ("n_x", "n_u", "N"):
        _require(doc, ["meta", key])
    for key in ("in_offset", "in_scale", "out_offset", "out_scale"):
        _require(doc, ["scaling", key])
    if not isinstance(layers_doc, list) or not layers_doc:
        raise WeightFileError("layers: must be a non-empty list")
    layers = []
    for i, layer in enumerate(layers_doc):
        if "w" not in layer or "b" not in layer:
            raise WeightFileError(f"layers[{i}]: needs fields 'w' and 'b'")
        layers.append((np.asarray(layer["w"], dtype=float), np.asarray(layer["b"], dtype=float)))
    policy = MlpPolicy(
        layers=layers,
        in_offset=scaling["in_offset"],
        in_scale=scaling["in_scale"],
        out_offset=scaling["out_offset"],
        out_scale=scaling["out_scale"],
        n_x=int(meta["n_x"]),
        n_u=int(meta["n_u"]),
        N=int(meta["N"]),
        benchmark=str(meta.get("benchmark", "")),
        training_tol=float(meta.get("training_tol", float("nan"))),
    )
    inputs = np.asarray(_require(doc, ["probe", "inputs"]), dtype=float)
    outputs = np.asarray(_require(doc, ["probe", "outputs"]), dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != policy.n_x:
        raise WeightFileError("probe.inputs: expected shape (n_probe, n_x)")
    if outputs.shape != (inputs.shape[0], policy.n_u * policy.N):
        raise WeightFileError("probe.outputs: expected shape (n_probe, n_u*N)")
    for i, xi in enumerate(inputs):
        got = infer(policy, xi).ravel()
        if not np.allclose(got, outputs[i], rtol=PROBE_RTOL, atol=1e-12):
            raise WeightFileError(
                f"probe.outputs[{i}]: stored outputs disagree with inference "
                f"(max abs dev {np.max(np.abs(got - outputs[i])):.3e})"
            )
    policy.probe_inputs = inputs
    policy.probe_outputs = outputs
    return policy
