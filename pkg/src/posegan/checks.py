"""The gradient verification suite: every op plus both end-to-end losses.

Each item perturbs one tensor of a small, deterministically seeded problem
and compares analytic gradients against central differences via
:func:`posegan.autodiff.grad_check`. The suite is the backing for the
``gradcheck`` CLI subcommand and for the acceptance gate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import ggnn
from .autodiff import Tensor, grad_check
from .models import (
    CascadeGenerator,
    GraphDiscriminator,
    loss_discriminator,
    loss_generator,
    loss_generator_adversarial,
)
from .skeleton import lsp_14, mpii_16

__all__ = ["suite_items", "run_suite", "SUITE_TOLERANCE"]

SUITE_TOLERANCE = 1e-4


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([20260809, tag]))


def _tracked(rng, shape, offset=0.0) -> Tensor:
    return Tensor(rng.normal(size=shape) + offset, track_grad=True)


def _away_from_zero(rng, shape, margin=0.25) -> Tensor:
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return Tensor(x, track_grad=True)


def _check_add(eps):
    rng = _rng(1)
    b = Tensor(rng.normal(size=(3, 4)))
    return grad_check(lambda a: ad.tsum(ad.mul(ad.add(a, b), b)), _tracked(rng, (3, 4)), eps)


def _check_sub(eps):
    rng = _rng(2)
    b = Tensor(rng.normal(size=(3, 4)))
    err1 = grad_check(lambda a: ad.tsum(ad.mul(ad.sub(a, b), b)), _tracked(rng, (3, 4)), eps)
    a = Tensor(rng.normal(size=(3, 4)))
    err2 = grad_check(lambda t: ad.tsum(ad.mul(ad.sub(a, t), t)), _tracked(rng, (3, 4)), eps)
    return max(err1, err2)


def _check_mul(eps):
    rng = _rng(3)
    b = Tensor(rng.normal(size=(5,)))
    err1 = grad_check(lambda a: ad.tsum(ad.mul(a, b)), _tracked(rng, (5,)), eps)
    err2 = grad_check(lambda a: ad.tsum(ad.mul(ad.mul(a, a), 0.7)), _tracked(rng, (5,)), eps)
    return max(err1, err2)


def _check_div(eps):
    rng = _rng(19)
    b = Tensor(rng.uniform(0.5, 2.0, size=(5,)))
    err1 = grad_check(lambda a: ad.tsum(ad.div(a, b)), _tracked(rng, (5,)), eps)
    a = Tensor(rng.normal(size=(5,)))
    t = Tensor(rng.uniform(0.5, 2.0, size=(5,)), track_grad=True)
    err2 = grad_check(lambda d: ad.tsum(ad.div(a, d)), t, eps)
    return max(err1, err2)


def _check_matmul(eps):
    rng = _rng(4)
    b = Tensor(rng.normal(size=(5, 3)))
    err1 = grad_check(lambda a: ad.tsum(ad.mul(ad.matmul(a, b), 0.5)), _tracked(rng, (4, 5)), eps)
    a = Tensor(rng.normal(size=(4, 5)))
    err2 = grad_check(lambda t: ad.tsum(ad.matmul(a, t)), _tracked(rng, (5, 3)), eps)
    return max(err1, err2)


def _check_conv2d(eps):
    rng = _rng(5)
    k = Tensor(rng.normal(size=(3, 2, 4, 4)), track_grad=True)
    bias = Tensor(rng.normal(size=(3,)), track_grad=True)
    x = _tracked(rng, (2, 8, 8))
    weight = Tensor(rng.normal(size=(3, 4, 4)))

    def loss_wrt(t):
        return ad.tsum(ad.mul(ad.conv2d(x, k, bias, stride=2, pad=1), weight))

    errs = [grad_check(loss_wrt, t, eps) for t in (x, k, bias)]
    return max(errs)


def _check_conv_transpose2d(eps):
    rng = _rng(6)
    k = Tensor(rng.normal(size=(3, 2, 4, 4)), track_grad=True)
    y = _tracked(rng, (3, 4, 4))
    weight = Tensor(rng.normal(size=(2, 8, 8)))

    def loss_wrt(t):
        return ad.tsum(ad.mul(ad.conv_transpose2d(y, k, stride=2, pad=1), weight))

    return max(grad_check(loss_wrt, t, eps) for t in (y, k))


def _check_sigmoid(eps):
    rng = _rng(7)
    return grad_check(lambda x: ad.tsum(ad.sigmoid(x)), _tracked(rng, (6,)), eps)


def _check_tanh(eps):
    rng = _rng(8)
    return grad_check(lambda x: ad.tsum(ad.tanh(x)), _tracked(rng, (6,)), eps)


def _check_relu(eps):
    rng = _rng(9)
    return grad_check(lambda x: ad.tsum(ad.mul(ad.relu(x), 0.3)), _away_from_zero(rng, (8,)), eps)


def _check_sqrt(eps):
    rng = _rng(10)
    x = Tensor(rng.uniform(0.5, 3.0, size=(6,)), track_grad=True)
    return grad_check(lambda t: ad.tsum(ad.sqrt(t)), x, eps)


def _check_log(eps):
    rng = _rng(11)
    x = Tensor(rng.uniform(0.2, 0.9, size=(6,)), track_grad=True)
    return grad_check(lambda t: ad.tsum(ad.log(t)), x, eps)


def _check_add_rowvec(eps):
    rng = _rng(12)
    a = Tensor(rng.normal(size=(4, 3)))
    weight = Tensor(rng.normal(size=(4, 3)))
    return grad_check(lambda b: ad.tsum(ad.mul(ad.add_rowvec(a, b), weight)), _tracked(rng, (3,)), eps)


def _check_shape_ops(eps):
    rng = _rng(13)
    weight = Tensor(rng.normal(size=(4,)))

    def f(x):
        t = ad.transpose(x, (1, 0, 2))
        flat = ad.reshape(t, (6, 4))
        return ad.tsum(ad.mul(ad.tsum(flat, axes=0), weight))

    return grad_check(f, _tracked(rng, (2, 3, 4)), eps)


def _check_gru_update(eps):
    rng = _rng(14)
    params = ggnn.GgnnParams.init(4, rng)
    states = Tensor(rng.normal(size=(3, 4)))
    messages = Tensor(rng.normal(size=(3, 4)))
    readout = Tensor(rng.normal(size=(3, 4)))

    def loss_wrt(t):
        return ad.tsum(ad.mul(ggnn.gru_update(states, messages, params), readout))

    return max(grad_check(loss_wrt, t, eps) for t in params.tensors())


def _check_propagate(eps):
    rng = _rng(15)
    g = lsp_14()
    params = ggnn.GgnnParams.init(4, rng)
    states = Tensor(rng.normal(size=(g.n_nodes, 4)), track_grad=True)
    readout = Tensor(rng.normal(size=(g.n_nodes, 4)))

    def loss_wrt(t):
        return ad.tsum(ad.mul(ggnn.propagate(g, states, params, 2), readout))

    tensors = params.tensors() + [states]
    return max(grad_check(loss_wrt, t, eps) for t in tensors)


def _toy_generator():
    rng = _rng(16)
    gen = CascadeGenerator(3, rng, channels=(4, 6, 8))
    image = Tensor(rng.normal(size=(1, 16, 16)))
    gt = Tensor(np.abs(rng.normal(size=(3, 4, 4))))
    vis = np.array([1.0, 1.0, 0.0])
    return gen, image, gt, vis


def _check_generator_loss(eps):
    gen, image, gt, vis = _toy_generator()

    def loss_wrt(t):
        return loss_generator(gen.forward(image), gt, vis)

    return max(grad_check(loss_wrt, t, eps) for t in gen.params())


def _toy_discriminator():
    rng = _rng(17)
    g = mpii_16()
    disc = GraphDiscriminator(g, 8, rng, hidden_dim=6, steps=2, enc_channels=3)
    real = Tensor(np.abs(rng.normal(size=(g.n_nodes, 8, 8))))
    fake = Tensor(np.abs(rng.normal(size=(g.n_nodes, 8, 8))))
    return disc, real, fake


def _check_discriminator_loss(eps):
    disc, real, fake = _toy_discriminator()

    def loss_wrt(t):
        return loss_discriminator(disc.forward(real), disc.forward(fake))

    return max(grad_check(loss_wrt, t, eps) for t in disc.params())


def _check_combined_objective(eps):
    rng = _rng(18)
    gen = CascadeGenerator(3, rng, channels=(4, 6, 8))
    from .skeleton import SkeletonGraph

    chain = SkeletonGraph(3, ((0, 1), (1, 2)), ("a", "b", "c"), ())
    disc = GraphDiscriminator(chain, 4, rng, hidden_dim=5, steps=2, enc_channels=2)
    image = Tensor(rng.normal(size=(1, 16, 16)))
    gt = Tensor(np.abs(rng.normal(size=(3, 4, 4))))
    vis = np.array([1.0, 0.0, 1.0])
    alpha = 0.01

    def loss_wrt(t):
        pred = gen.forward(image)
        l_g = loss_generator(pred, gt, vis)
        l_adv = loss_generator_adversarial(disc.forward(pred))
        return ad.add(l_g, ad.mul(l_adv, alpha))

    return max(grad_check(loss_wrt, t, eps) for t in gen.params())


def suite_items():
    """(name, callable(eps) -> max relative error) for every checked item."""
    return [
        ("elementwise-add", _check_add),
        ("elementwise-sub", _check_sub),
        ("elementwise-mul", _check_mul),
        ("elementwise-div", _check_div),
        ("matmul", _check_matmul),
        ("conv2d", _check_conv2d),
        ("conv-transpose2d", _check_conv_transpose2d),
        ("sigmoid", _check_sigmoid),
        ("tanh", _check_tanh),
        ("relu", _check_relu),
        ("sqrt", _check_sqrt),
        ("log", _check_log),
        ("add-rowvec", _check_add_rowvec),
        ("shape-ops", _check_shape_ops),
        ("gru-update", _check_gru_update),
        ("ggnn-propagate", _check_propagate),
        ("generator-heatmap-loss", _check_generator_loss),
        ("discriminator-bce-loss", _check_discriminator_loss),
        ("combined-generator-objective", _check_combined_objective),
    ]


def run_suite(eps: float = 1e-5):
    """Run every item; returns a list of (name, max relative error)."""
    return [(name, fn(eps)) for name, fn in suite_items()]
