"""Autograd versus central differences (float64, step 1e-3, rel. err < 1e-3)."""

import pytest
import torch

from gradcheck import check_grads, weighted_sum
from proccaps.blocks import ColorQuantizationHead, DownBlock, PatchDiscriminator, PostBlock, PreBlock, UpBlock
from proccaps.capsules import CapsuleBottleneck
from proccaps.training.losses import PerceptualExtractor, loss_adv, loss_ch, loss_perc, loss_q

TOL = 1e-3
STEP = 1e-3


def leaves(module, *inputs):
    module.double()
    return list(inputs) + [p for p in module.parameters() if p.requires_grad]


def rand(*shape, seed=0, scale=1.0):
    gen = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_()


def run(module, f, inputs):
    err = check_grads(f, leaves(module, *inputs), h=STEP, module=module)
    assert err < TOL, f"relative error {err:.2e}"


def test_preb():
    torch.manual_seed(0)
    m = PreBlock(1, 4)
    x = rand(1, 1, 8, 8)
    run(m, lambda: weighted_sum(m(x)), [x])


def test_dbd():
    torch.manual_seed(1)
    m = DownBlock(3, 4, stride=2)
    x = rand(1, 3, 4, 4, seed=1)
    run(m, lambda: weighted_sum(m(x)), [x])


def test_dbu():
    torch.manual_seed(2)
    m = UpBlock(3, 2, 4, 5)
    x, skip = rand(1, 3, 3, 3, seed=2), rand(1, 2, 2, 2, seed=3)
    run(m, lambda: weighted_sum(m(x, skip)), [x, skip])


def test_postb():
    torch.manual_seed(3)
    m = PostBlock(3, 2, 4, 6)
    y, skip = rand(1, 3, 3, 3, seed=4), rand(1, 2, 2, 2, seed=5)
    run(m, lambda: weighted_sum(m(y, skip)), [y, skip])


def test_cqb(grid):
    torch.manual_seed(4)
    centers = grid.centers[::20]
    m = ColorQuantizationHead(3, centers, residual=True, upscale=4)
    x, omega = rand(1, 3, 2, 2, seed=6), rand(1, 3, 2, 2, seed=7)

    def f():
        logits, ab = m(x, omega)
        return weighted_sum(logits) + weighted_sum(ab, seed=2) / 100

    run(m, f, [x, omega])


def test_capsule_path():
    torch.manual_seed(5)
    m = CapsuleBottleneck(3, 2, 3, 2, 4, 2, iterations=3)
    x = rand(1, 3, 2, 2, seed=8)

    def f():
        out, v, _ = m(x)
        return weighted_sum(out) + weighted_sum(v, seed=3)

    run(m, f, [x])


def test_discriminator():
    torch.manual_seed(6)
    m = PatchDiscriminator(2, n_layers=2)
    L, ab = rand(1, 1, 16, 16, seed=9), rand(1, 2, 16, 16, seed=10, scale=30)
    run(m, lambda: weighted_sum(m(L, ab)), [L, ab])


def test_loss_q():
    logits = rand(2, 6, 2, 2, seed=11)
    target = torch.softmax(torch.randn(2, 6, 2, 2, dtype=torch.float64), dim=1)
    rarity = torch.rand(6, dtype=torch.float64) + 0.5
    err = check_grads(lambda: loss_q(logits, target, rarity), [logits], h=STEP)
    assert err < TOL


def test_loss_ch():
    pred = rand(2, 2, 3, 3, seed=12, scale=20)
    true = torch.randn(2, 2, 3, 3, dtype=torch.float64) * 20
    assert check_grads(lambda: loss_ch(pred, true), [pred], h=STEP) < TOL


@pytest.mark.parametrize("real", [True, False])
def test_loss_adv(real):
    logits = rand(2, 1, 3, 3, seed=13, scale=2)
    assert check_grads(lambda: loss_adv(logits, real), [logits], h=STEP) < TOL


def test_loss_perc():
    ext = PerceptualExtractor(4, channels=3, dilations=(1, 2)).double()
    pred = rand(1, 4, 6, 6, seed=14)
    target = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    assert check_grads(lambda: loss_perc(pred, target, ext), [pred], h=STEP, module=ext) < TOL


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x**2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.1 * x


def test_checker_catches_a_wrong_gradient():
    x = rand(5, seed=15)
    assert check_grads(lambda: _WrongGrad.apply(x).sum(), [x], h=STEP) > 1e-2
    assert check_grads(lambda: (x**2).sum(), [x], h=STEP) < 1e-9


def test_checker_handles_kinks():
    m = torch.nn.Sequential(torch.nn.ReLU())
    x = torch.tensor([1e-4, 0.5, -0.5, 2.0], dtype=torch.float64, requires_grad=True)
    assert check_grads(lambda: m(x).sum(), [x], h=STEP, module=m) < 1e-9
