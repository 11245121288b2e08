"""Gradient-penalty Wasserstein GAN over vectorised life patterns."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .core import HOURS, LifePattern, alphabet_from_dim, devectorize, pattern_dim, vectorize
from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

GAN_FORMAT = "geoavatar-gan-v1"


@dataclass(frozen=True)
class TrainConfig:
    lambda_gp: float = 10.0
    n_critic: int = 5
    batch_size: int = 32
    epochs: int = 200
    lr: float = 3e-4
    betas: tuple[float, float] = (0.5, 0.9)
    z_dim: int = 64
    gen_hidden: tuple[int, ...] = (256, 256)
    critic_hidden: tuple[int, ...] = (256, 256)
    seed: int = 0

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be >= 0")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0 or self.z_dim < 1:
            raise ConfigError("batch_size and z_dim must be >= 1; epochs and lr must be >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "gen_hidden", tuple(self.gen_hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))


class RowSoftmax(nn.Module):
    """Softmax over every simplex block of the ``[pi, T]`` layout."""

    def __init__(self, L: int):
        super().__init__()
        self.L = L

    def forward(self, logits):
        L = self.L
        pi = torch.softmax(logits[:, :L], dim=1)
        T = torch.softmax(logits[:, L:].reshape(-1, HOURS * L, L), dim=2)
        return torch.cat([pi, T.reshape(logits.shape[0], -1)], dim=1)


def mlp(sizes, activation, dtype=torch.float32) -> nn.Sequential:
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b, dtype=dtype))
        if k < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


class Generator(nn.Module):
    def __init__(self, z_dim: int, hidden, L: int, dtype=torch.float32):
        super().__init__()
        self.z_dim = z_dim
        self.L = L
        self.body = mlp([z_dim, *hidden, pattern_dim(L)], nn.ReLU, dtype)
        self.head = RowSoftmax(L)

    def forward(self, z):
        return self.head(self.body(z))


class Critic(nn.Module):
    def __init__(self, in_dim: int, hidden, dtype=torch.float32):
        super().__init__()
        self.net = mlp([in_dim, *hidden, 1], lambda: nn.LeakyReLU(0.2), dtype)

    def forward(self, x):
        return self.net(x).squeeze(-1)


@dataclass
class GeneratorModel:
    net: Generator
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def L(self) -> int:
        return self.net.L

    @property
    def z_dim(self) -> int:
        return self.net.z_dim


def init_generator(L: int, cfg: TrainConfig, seed: int | None = None) -> GeneratorModel:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return GeneratorModel(Generator(cfg.z_dim, cfg.gen_hidden, L), cfg)


def _to_tensor(x, like: nn.Module):
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(x), dtype=p.dtype)


def generator_forward(model: GeneratorModel, z) -> LifePattern:
    z = np.asarray(z, dtype=float)
    if z.shape != (model.z_dim,):
        raise ShapeError(f"latent vector must have length {model.z_dim}, got shape {z.shape}")
    with torch.no_grad():
        out = model.net(_to_tensor(z[None], model.net))[0]
    return devectorize(out.double().numpy(), model.L)


def sample_life_patterns(model: GeneratorModel, n: int, rng: np.random.Generator,
                         chunk: int = 1024) -> list[LifePattern]:
    if n <= 0:
        return []
    z = rng.standard_normal((n, model.z_dim))
    out = []
    with torch.no_grad():
        for k in range(0, n, chunk):
            x = model.net(_to_tensor(z[k:k + chunk], model.net)).double().numpy()
            out.extend(devectorize(row, model.L) for row in x)
    return out


def gradient_penalty(critic, x_real, x_fake, u):
    """Mean over the batch of ``(||grad_x D(x_hat)||_2 - 1)^2`` at interpolates.

    The returned tensor keeps its graph so it can be differentiated again
    with respect to the critic parameters.
    """
    if u.dim() == 1:
        u = u[:, None]
    # the penalty needs input gradients even when the caller runs under no_grad
    with torch.enable_grad():
        x_hat = (u * x_real + (1 - u) * x_fake).detach().requires_grad_(True)
        d = critic(x_hat)
        if not d.requires_grad:
            grad = torch.zeros_like(x_hat)
        else:
            (grad,) = torch.autograd.grad(d.sum(), x_hat, create_graph=True, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(x_hat)
        return ((grad.norm(2, dim=1) - 1) ** 2).mean()


def critic_loss(critic, x_real, x_fake, u, lambda_gp: float):
    w = critic(x_real).mean() - critic(x_fake).mean()
    loss = -w
    if lambda_gp > 0:
        loss = loss + lambda_gp * gradient_penalty(critic, x_real, x_fake, u)
    return loss, w


def generator_loss(critic, generator, z):
    return -critic(generator(z)).mean()


def _as_matrix(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return np.asarray(corpus, dtype=float)
    return np.stack([vectorize(p) for p in corpus])


def train_wgan(pattern_corpus, cfg: TrainConfig, rng: np.random.Generator | None = None,
               generator: GeneratorModel | None = None):
    """Standard WGAN-GP loop; returns ``(GeneratorModel, log)``.

    ``log`` has one dict per epoch with the mean Wasserstein estimate and both
    losses. Raises :class:`DataError` if a loss turns non-finite.
    """
    X = _as_matrix(pattern_corpus)
    N, M = X.shape
    if N < 2 * cfg.batch_size:
        raise ConfigError(f"corpus of {N} patterns is smaller than 2 x batch ({cfg.batch_size})")
    L = alphabet_from_dim(M)
    seed = int(rng.integers(2**62)) if rng is not None else cfg.seed
    gen_torch = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    if generator is None:
        generator = GeneratorModel(Generator(cfg.z_dim, cfg.gen_hidden, L), cfg)
    elif generator.L != L:
        raise ShapeError("generator alphabet does not match the corpus")
    G = generator.net
    D = Critic(M, cfg.critic_hidden)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=cfg.betas)
    data = torch.as_tensor(X, dtype=torch.float32)
    B = cfg.batch_size
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(N, generator=gen_torch)
        w_sum = d_sum = g_sum = 0.0
        n_d = n_g = 0
        for k in range(N // B):
            real = data[perm[k * B:(k + 1) * B]]
            z = torch.randn(B, cfg.z_dim, generator=gen_torch)
            with torch.no_grad():
                fake = G(z)
            u = torch.rand(B, 1, generator=gen_torch)
            loss_d, w = critic_loss(D, real, fake, u, cfg.lambda_gp)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            w_sum += float(w.detach())
            d_sum += float(loss_d.detach())
            n_d += 1
            step += 1
            if step % cfg.n_critic == 0:
                z = torch.randn(B, cfg.z_dim, generator=gen_torch)
                loss_g = generator_loss(D, G, z)
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()
                g_sum += float(loss_g.detach())
                n_g += 1
        entry = {
            "epoch": epoch,
            "wasserstein": w_sum / max(n_d, 1),
            "critic_loss": d_sum / max(n_d, 1),
            "generator_loss": g_sum / max(n_g, 1),
        }
        if not all(math.isfinite(v) for v in entry.values()):
            raise DataError(f"WGAN training diverged at epoch {epoch}: {entry}")
        history.append(entry)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d  W=%.4f  D=%.4f  G=%.4f", epoch, entry["wasserstein"],
                     entry["critic_loss"], entry["generator_loss"])
    return GeneratorModel(G, cfg), history


def model_to_dict(model: GeneratorModel) -> dict:
    layers = []
    for mod in model.net.body:
        if isinstance(mod, nn.Linear):
            w = mod.weight.detach().cpu()
            layers.append({
                "shape": list(w.shape),
                "weight": [float(x) for x in w.reshape(-1).tolist()],
                "bias": [float(x) for x in mod.bias.detach().cpu().tolist()],
            })
    cfg = asdict(model.config)
    return {"format": GAN_FORMAT, "L": model.L, "z_dim": model.z_dim,
            "activation": "relu", "output": "row_softmax", "config": cfg, "layers": layers}


def model_from_dict(d: dict) -> GeneratorModel:
    if d.get("format") != GAN_FORMAT:
        raise DataError(f"not a GAN model file (format={d.get('format')!r})")
    cfg = TrainConfig(**d["config"])
    hidden = tuple(layer["shape"][0] for layer in d["layers"][:-1])
    net = Generator(int(d["z_dim"]), hidden, int(d["L"]))
    linears = [m for m in net.body if isinstance(m, nn.Linear)]
    with torch.no_grad():
        for mod, layer in zip(linears, d["layers"]):
            mod.weight.copy_(torch.tensor(layer["weight"], dtype=torch.float32).reshape(layer["shape"]))
            mod.bias.copy_(torch.tensor(layer["bias"], dtype=torch.float32))
    return GeneratorModel(net, cfg)
