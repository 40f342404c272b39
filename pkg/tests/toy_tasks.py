"""Small synthetic training tasks shared by module and acceptance tests."""

import numpy as np

from codecflow.flow import FlowConfig, FlowModel, NormStats, cfm_loss, fuse_condition
from codecflow.numerics import AdamW, Tensor, backward, clip_grad_norm
from codecflow.scrvq import QuantizerConfig, QuantizerStack, codebook_stats, init_from_data, quantize, scrvq_loss
from codecflow.velocity_net import UConformerConfig

TOY_D, TOY_T = 4, 8
TOY_SIGMA = 0.5
# voicing label used as the condition -> mean of the target Gaussian
TOY_MEANS = {1: -1.0, 2: 1.0}


def toy_batch(rng, batch):
    labels = rng.choice(list(TOY_MEANS), size=batch)
    mu = np.array([TOY_MEANS[k] for k in labels])[:, None, None]
    z1 = mu + TOY_SIGMA * rng.standard_normal((batch, TOY_D, TOY_T))
    s = np.repeat(labels[:, None], TOY_T, axis=1)
    return np.zeros((batch, TOY_D, TOY_T)), s, z1


def train_toy_flow(steps=600, batch=64, lr=2e-3, seed=0):
    """Flow model fit to ``z1 ~ N(mean(s), sigma^2)``; returns the model and its loss trace."""
    net = UConformerConfig(
        latent_dim=TOY_D, cond_dim=8, model_dim=32, heads=2, ffn_dim=64, enc_layers=1, dec_layers=1, conv_kernel=3
    )
    cfg = FlowConfig(latent_dim=TOY_D, cond_dim=8, label_dim=4, net=net)
    rng = np.random.default_rng(seed)
    model = FlowModel(cfg, rng)
    model.stats = NormStats.identity(TOY_D)
    opt = AdamW(list(model.named_parameters()), lr=lr, weight_decay=0.0)
    losses = []
    for k in range(steps):
        opt.state.lr = lr * (1 - k / steps)
        z_l, s, z1 = toy_batch(rng, batch)
        loss = cfm_loss(model, z1, fuse_condition(model, z_l, s), rng)
        backward(loss)
        clip_grad_norm(model.parameters(), 1.0)
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.data))
    return model, np.array(losses)


def train_quantizer(lambda_margin, steps=300, seed=0, dim=8):
    """4-stage, K=64 quantizer fit to a unit Gaussian stream; stats on a held-out draw."""
    cfg = QuantizerConfig(
        latent_dim=dim, n_stages=4, codebook_size=64, code_dim=8, lambda_margin=lambda_margin, lambda_mono=0.25, decay_ratio=0.9
    )
    stack = QuantizerStack(cfg, np.random.default_rng(seed))
    data = np.random.default_rng(seed + 1)
    init_from_data(stack, data.standard_normal((16, dim, 32)), np.random.default_rng(seed + 2))
    opt = AdamW(list(stack.named_parameters()), lr=3e-3, weight_decay=0.0)
    for _ in range(steps):
        zt = Tensor(data.standard_normal((16, dim, 32)))
        backward(scrvq_loss(quantize(zt, stack), zt, stack)["total"])
        opt.step()
        opt.zero_grad()
    return stack, codebook_stats(stack, np.random.default_rng(99).standard_normal((64, dim, 32)))
