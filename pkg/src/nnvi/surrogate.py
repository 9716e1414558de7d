"""Multilayer perceptron surrogate ``f(t, x; theta)`` with exact derivative jets.

The jet is propagated forward through the layers alongside the activations
(first derivatives along every input direction, second derivatives either
as a full spatial Hessian or along a fixed set of spatial directions), so a
single reverse pass gives parameter gradients of any loss built on it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import ContractError, ParameterError

__all__ = ["SurrogateConfig", "SurrogateModel", "Jet", "forward", "jet",
           "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION"]

CHECKPOINT_VERSION = 1

_BOUNDED = {"tanh": True, "sigmoid": True, "softplus": False}
_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class SurrogateConfig:
    """Architecture of the surrogate.

    ``activation`` must be twice continuously differentiable.  ``softplus``
    is unbounded, so it is accepted only with ``allow_unbounded=True``.
    """

    input_dim: int
    hidden_layers: tuple = (64, 64, 64)
    activation: str = "tanh"
    parameter_seed: int = 0
    dtype: str = "float64"
    allow_unbounded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 2:
            raise ParameterError("input_dim counts time plus at least one space variable")
        if not self.hidden_layers or min(self.hidden_layers) < 1:
            raise ParameterError("need at least one hidden layer of positive width")
        if self.activation not in _BOUNDED:
            raise ParameterError(f"activation must be one of {sorted(_BOUNDED)}")
        if not _BOUNDED[self.activation] and not self.allow_unbounded:
            raise ParameterError(f"{self.activation} is unbounded; pass allow_unbounded=True")
        if self.dtype not in _DTYPES:
            raise ParameterError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


def _act(name, z):
    """Activation and its first two derivatives."""
    if name == "tanh":
        a = torch.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "sigmoid":
        a = torch.sigmoid(z)
        d1 = a * (1.0 - a)
        return a, d1, d1 * (1.0 - 2.0 * a)
    a = nn.functional.softplus(z)
    s = torch.sigmoid(z)
    return a, s, s * (1.0 - s)


@dataclass
class Jet:
    """Batched derivative jet at ``points`` (shape ``(B, 1+d)``).

    ``hessian`` is ``(B, d, d)`` when requested in full; ``dir2`` is
    ``(B, k)``, the second derivatives along the columns of a ``(d, k)``
    direction matrix.
    """

    points: torch.Tensor
    value: torch.Tensor
    dt: torch.Tensor
    grad: torch.Tensor
    hessian: Optional[torch.Tensor] = None
    dir2: Optional[torch.Tensor] = None


class SurrogateModel(nn.Module):
    """MLP on affinely normalised inputs with an affine output map.

    Inputs are mapped to ``[-1, 1]`` using the problem box; the raw network
    output is multiplied by ``output_scale`` and shifted by ``output_shift``.
    """

    def __init__(self, config: SurrogateConfig, in_center=None, in_halfwidth=None,
                 output_scale: float = 1.0, output_shift: float = 0.0):
        super().__init__()
        self.config = config
        D = config.input_dim
        dtype = config.torch_dtype
        center = np.zeros(D) if in_center is None else np.asarray(in_center, dtype=float)
        half = np.ones(D) if in_halfwidth is None else np.asarray(in_halfwidth, dtype=float)
        if center.shape != (D,) or half.shape != (D,) or np.any(half <= 0):
            raise ContractError("normalisation constants must have shape (input_dim,) with positive widths")
        self.register_buffer("in_center", torch.as_tensor(center, dtype=dtype))
        self.register_buffer("in_halfwidth", torch.as_tensor(half, dtype=dtype))
        self.register_buffer("output_scale", torch.tensor(float(output_scale), dtype=dtype))
        self.register_buffer("output_shift", torch.tensor(float(output_shift), dtype=dtype))
        widths = (D,) + config.hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(widths[:-1], widths[1:]))
        self.out = nn.Linear(widths[-1], 1, dtype=dtype)
        self.reset_parameters()

    @classmethod
    def for_problem(cls, config: SurrogateConfig, problem, output_scale=None, output_shift=None):
        """Build a model normalised to ``problem``'s space-time box.

        Output scale/shift default to the spread and mean of the obstacle on
        a fixed grid of the box.
        """
        if config.input_dim != 1 + problem.dim:
            raise ContractError(f"input_dim {config.input_dim} != 1 + problem dim {problem.dim}")
        lo = np.concatenate([[0.0], problem.lower])
        hi = np.concatenate([[problem.horizon], problem.upper])
        if output_scale is None or output_shift is None:
            rng = np.random.default_rng(12345)
            x = torch.as_tensor(rng.uniform(problem.lower, problem.upper, size=(4096, problem.dim)))
            g = problem.obstacle(torch.zeros(4096, dtype=x.dtype), x).numpy()
            output_scale = float(max(g.std(), 1e-3)) if output_scale is None else output_scale
            output_shift = float(g.mean()) if output_shift is None else output_shift
        return cls(config, 0.5 * (lo + hi), 0.5 * (hi - lo), output_scale, output_shift)

    def reset_parameters(self):
        """Fan-in scaled (Xavier-normal) weights, zero biases, seeded."""
        gen = torch.Generator().manual_seed(int(self.config.parameter_seed))
        with torch.no_grad():
            for lin in list(self.hidden) + [self.out]:
                fan_in, fan_out = lin.in_features, lin.out_features
                std = math.sqrt(2.0 / (fan_in + fan_out))
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen, dtype=lin.weight.dtype) * std)
                lin.bias.zero_()

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    def parameter_vector(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().cpu().numpy().copy()

    def set_parameter_vector(self, theta) -> None:
        vec = torch.as_tensor(np.asarray(theta), dtype=self.config.torch_dtype)
        n = sum(p.numel() for p in self.parameters())
        if vec.numel() != n:
            raise ContractError(f"parameter vector has {vec.numel()} entries, model needs {n}")
        nn.utils.vector_to_parameters(vec, self.parameters())

    def _check(self, X) -> torch.Tensor:
        X = torch.as_tensor(X, dtype=self.config.torch_dtype)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractError(f"expected points of shape (n, {self.input_dim}), got {tuple(X.shape)}")
        return X

    def forward(self, X) -> torch.Tensor:
        X = self._check(X)
        h = (X - self.in_center) * (1.0 / self.in_halfwidth)
        for lin in self.hidden:
            h, _, _ = _act(self.config.activation, lin(h))
        wo = self.out.weight.squeeze(0)
        return (h @ wo + self.out.bias.squeeze(0)) * self.output_scale + self.output_shift

    def jet(self, X, hessian: str | bool = "full", directions=None) -> Jet:
        """Value, time derivative, spatial gradient and second derivatives.

        Parameters
        ----------
        X : (n, 1+d) points
        hessian : {"full", "directional", False}
            ``"directional"`` needs ``directions``, a ``(d, k)`` matrix.
        """
        X = self._check(X)
        act = self.config.activation
        B, D = X.shape
        d = D - 1
        inv_h = 1.0 / self.in_halfwidth
        h = (X - self.in_center) * inv_h
        # tangents of the normalised input along raw coordinate directions
        first_lin = self.hidden[0]
        W0 = first_lin.weight * inv_h  # (out, D): d(pre)/d(raw input)
        if hessian == "directional":
            if directions is None:
                raise ContractError("directional second derivatives need a direction matrix")
            L = torch.as_tensor(np.asarray(directions), dtype=X.dtype)
            if L.ndim != 2 or L.shape[0] != d:
                raise ContractError(f"directions must have shape ({d}, k)")
        z = first_lin(h)
        T = W0.t().unsqueeze(0)  # (1, D, out), same for every point
        a, s1, s2 = _act(act, z)
        J = s1.unsqueeze(1) * T  # (B, D, out)
        S = H = None
        if hessian == "directional":
            Tw = torch.einsum("ik,nio->nko", L, T[:, 1:, :])
            S = s2.unsqueeze(1) * Tw * Tw  # (B, k, out)
        elif hessian in ("full", True):
            Tx = T[:, 1:, :]
            H = s2.unsqueeze(1).unsqueeze(1) * Tx.unsqueeze(2) * Tx.unsqueeze(1)  # (B, d, d, out)
        for lin in self.hidden[1:]:
            W = lin.weight
            z = lin(a)
            T = J @ W.t()
            a, s1, s2 = _act(act, z)
            if S is not None:
                Tw = torch.einsum("ik,nio->nko", L, T[:, 1:, :])
                S = s2.unsqueeze(1) * Tw * Tw + s1.unsqueeze(1) * (S @ W.t())
            elif H is not None:
                Tx = T[:, 1:, :]
                H = (s2.unsqueeze(1).unsqueeze(1) * Tx.unsqueeze(2) * Tx.unsqueeze(1)
                     + s1.unsqueeze(1).unsqueeze(1) * (H @ W.t()))
            J = s1.unsqueeze(1) * T
        wo = self.out.weight.squeeze(0)
        scale = self.output_scale
        value = (a @ wo + self.out.bias.squeeze(0)) * scale + self.output_shift
        grads = (J @ wo) * scale
        out = Jet(X, value, grads[:, 0], grads[:, 1:])
        if S is not None:
            out.dir2 = (S @ wo) * scale
        elif H is not None:
            out.hessian = (H @ wo) * scale
        return out


def forward(model: SurrogateModel, batch) -> torch.Tensor:
    """``f(t, x; theta)`` at every row of ``batch``."""
    return model(batch)


def jet(model: SurrogateModel, batch, hessian="full", directions=None) -> Jet:
    """Exact derivative jet of the surrogate at every row of ``batch``."""
    return model.jet(batch, hessian=hessian, directions=directions)


def save_checkpoint(model: SurrogateModel, path, extra: Optional[dict] = None) -> Path:
    """Write config, parameters and normalisation constants to ``.npz``."""
    path = Path(path)
    header = {
        "format": "nnvi-surrogate",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "extra": extra or {},
    }
    np.savez(
        path,
        header=np.array(json.dumps(header)),
        theta=model.parameter_vector(),
        in_center=model.in_center.cpu().numpy(),
        in_halfwidth=model.in_halfwidth.cpu().numpy(),
        output=np.array([float(model.output_scale), float(model.output_shift)]),
    )
    return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")


def load_checkpoint(path) -> tuple[SurrogateModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "nnvi-surrogate":
            raise ContractError(f"{path} is not a surrogate checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ContractError(f"checkpoint version {header['version']} is newer than supported")
        cfg = header["config"]
        cfg["hidden_layers"] = tuple(cfg["hidden_layers"])
        config = SurrogateConfig(**cfg)
        model = SurrogateModel(config, data["in_center"], data["in_halfwidth"],
                               float(data["output"][0]), float(data["output"][1]))
        model.set_parameter_vector(data["theta"])
    return model, header.get("extra", {})
