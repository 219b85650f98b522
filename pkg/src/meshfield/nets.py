"""Dense-MLP decoders, seeded init, Adam, and the warmup+cosine LR schedule.

Geometry decoder: 3 hidden layers x 256, SoftPlus, linear scalar output.
Radiance decoder: 4 hidden layers x 256, ReLU, linear 3-vector output
(sigmoid is applied by the caller so raw logits stay available).
The global sharpness is kept in log space so s_inv = exp(log_sharpness) > 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_SHARPNESS_INIT = math.log(30.0)


def _seeded_linear(n_in, n_out, gen):
    """Linear layer with uniform Kaiming-style fan-in init (+-1/sqrt(fan_in))."""
    lin = nn.Linear(n_in, n_out)
    bound = 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-bound, bound, generator=gen)
    return lin


class MLP(nn.Module):
    """Plain dense MLP; dims = [in, h1, ..., out], hidden activation shared."""

    def __init__(self, dims, activation="softplus", gen=None):
        super().__init__()
        self.dims = list(int(d) for d in dims)
        self.activation = activation
        self.layers = nn.ModuleList(
            _seeded_linear(self.dims[i], self.dims[i + 1], gen)
            for i in range(len(self.dims) - 1))

    def act(self, x):
        if self.activation == "softplus":
            return nn.functional.softplus(x)
        if self.activation == "relu":
            return nn.functional.relu(x)
        raise ValueError(f"unknown activation {self.activation!r}")

    def forward(self, x):
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"input dim {x.shape[-1]} != expected {self.dims[0]}")
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)

    def forward_with_tape(self, x):
        """Forward pass that also records hidden activations for inspection."""
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"input dim {x.shape[-1]} != expected {self.dims[0]}")
        hidden = []
        h = x
        for layer in self.layers[:-1]:
            h = self.act(layer(h))
            hidden.append(h)
        return self.layers[-1](h), hidden

    def flat_parameters(self):
        """Weights and biases concatenated in layer order as float32."""
        return np.concatenate([p.detach().cpu().numpy().astype(np.float32).ravel()
                               for p in self.parameters()])

    def load_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float32)
        off = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                if off + n > flat.size:
                    raise ValueError("decoder blob too short for declared layout")
                p.copy_(torch.from_numpy(flat[off:off + n].reshape(p.shape).copy()))
                off += n
        if off != flat.size:
            raise ValueError(f"decoder blob has {flat.size - off} trailing values")
        return self


def geometry_dims(cfg):
    return [cfg.geometry_in_dim, 256, 256, 256, 1]


def radiance_dims(cfg):
    return [cfg.radiance_in_dim, 256, 256, 256, 256, 3]


def new_geometry_decoder(cfg, gen=None):
    return MLP(geometry_dims(cfg), activation="softplus", gen=gen)


def new_radiance_decoder(cfg, gen=None):
    return MLP(radiance_dims(cfg), activation="relu", gen=gen)


@dataclass
class DecoderTable:
    """The decoder side of a scene: one geometry decoder, one or more
    radiance decoders (texture edits append entries), global sharpness."""
    geometry: MLP
    radiance: list
    log_sharpness: torch.Tensor

    @property
    def s_inv(self):
        return self.log_sharpness.exp()

    def parameters(self):
        yield from self.geometry.parameters()
        for r in self.radiance:
            yield from r.parameters()
        yield self.log_sharpness

    def to_dtype(self, dtype):
        self.geometry.to(dtype)
        for r in self.radiance:
            r.to(dtype)
        self.log_sharpness = self.log_sharpness.to(dtype)
        return self


def new_decoder_table(cfg, seed=0, n_radiance=1):
    gen = torch.Generator().manual_seed(int(seed))
    return DecoderTable(
        geometry=new_geometry_decoder(cfg, gen),
        radiance=[new_radiance_decoder(cfg, gen) for _ in range(n_radiance)],
        log_sharpness=torch.tensor(LOG_SHARPNESS_INIT, dtype=torch.float32),
    )


def mlp_forward(mlp: MLP, x):
    """Forward returning (output, tape); the tape backs mlp_backward."""
    x = torch.as_tensor(np.asarray(x, dtype=np.float64)) if not torch.is_tensor(x) else x
    x = x.detach().to(next(mlp.parameters()).dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    x = x.clone().requires_grad_(True)
    with torch.enable_grad():
        y, hidden = mlp.forward_with_tape(x)
    tape = {"mlp": mlp, "input": x, "output": y, "hidden": hidden, "used": False}
    return (y[0] if squeeze else y), tape


def mlp_backward(tape, output_cotangent):
    """Gradients of <cotangent, output> wrt every parameter and the input."""
    if tape.get("used"):
        raise RuntimeError("stale tape: backward was already taken")
    tape["used"] = True
    mlp, x, y = tape["mlp"], tape["input"], tape["output"]
    cot = torch.as_tensor(np.asarray(output_cotangent), dtype=y.dtype)
    cot = cot.reshape(y.shape)
    params = list(mlp.parameters())
    grads = torch.autograd.grad(y, params + [x], grad_outputs=cot, allow_unused=True)
    param_grads = {name: g for (name, _), g in zip(mlp.named_parameters(), grads)}
    input_grad = grads[-1]
    if input_grad.shape[0] == 1:
        input_grad = input_grad[0]
    return param_grads, input_grad


class AdamState:
    """First/second moment accumulators mirroring a list of parameters."""

    def __init__(self, params):
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.step = 0


def adam_step(params, grads, state: AdamState, lr,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS, names=None):
    """One in-place Adam update over a list of parameter tensors."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if torch.isnan(g).any():
                name = names[i] if names else f"param[{i}]"
                raise FloatingPointError(f"NaN gradient in {name}")
            state.m[i].mul_(beta1).add_(g, alpha=1 - beta1)
            state.v[i].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = state.m[i] / (1 - beta1 ** t)
            v_hat = state.v[i] / (1 - beta2 ** t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return state


def lr_at(step, base_lr, warmup, total):
    """Linear 0->base_lr ramp over warmup steps, then cosine decay to 0 at total."""
    step = min(max(step, 0), total)
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
