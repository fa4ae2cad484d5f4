"""Whole-network gradient verification against an independent framework.

A torch twin of each NetGraph is built with copied weights; loss values and
every parameter gradient must agree at double precision. This sidesteps the
kink-crossing noise that makes finite differences unusable on batchnorm+relu
networks while checking far more than sampled coordinates ever could. The
engine itself never imports torch; this is a test-only oracle.
"""

import numpy as np
import pytest

torch = pytest.importorskip("torch")

from contourforge.autograd import Tensor, bce_from_logits
from contourforge.nets import NetConfig, build, forward_logits
from contourforge.nn import BatchNorm2d, Conv2d, ConvTranspose2d


def _twin_conv(u: Conv2d):
    cout, cin, k, _ = u.w.data.shape
    m = torch.nn.Conv2d(cin, cout, k, dilation=u.dilation, padding=0, bias=True).double()
    with torch.no_grad():
        m.weight.copy_(torch.from_numpy(u.w.data))
        m.bias.copy_(torch.from_numpy(u.b.data))
    return m, [(u.w, m.weight), (u.b, m.bias)]


def _twin_tconv(u: ConvTranspose2d):
    cin, cout, k, _ = u.w.data.shape
    m = torch.nn.ConvTranspose2d(cin, cout, k, stride=u.stride, bias=True).double()
    with torch.no_grad():
        m.weight.copy_(torch.from_numpy(u.w.data))
        m.bias.copy_(torch.from_numpy(u.b.data))
    return m, [(u.w, m.weight), (u.b, m.bias)]


def _twin_bn(u: BatchNorm2d):
    m = torch.nn.BatchNorm2d(u.gamma.data.size, eps=u.eps, momentum=u.momentum).double()
    with torch.no_grad():
        m.weight.copy_(torch.from_numpy(u.gamma.data))
        m.bias.copy_(torch.from_numpy(u.beta.data))
        m.running_mean.copy_(torch.from_numpy(u.running_mean))
        m.running_var.copy_(torch.from_numpy(u.running_var))
    return m, [(u.gamma, m.weight), (u.beta, m.bias)]


class Twin(torch.nn.Module):
    def __init__(self, net):
        super().__init__()
        self.graph_nodes = net.nodes
        self.by_name = {n.name: n for n in net.nodes}
        self.mods = torch.nn.ModuleDict()
        self.pairs = []  # (engine param, torch param)
        for nd in net.nodes:
            blk = net.block(nd.name)
            if nd.kind in ("conv", "dilated-conv"):
                seq = []
                for u in blk.units:
                    if isinstance(u, Conv2d):
                        m, pairs = _twin_conv(u)
                        seq.append(m)
                    else:
                        m, pairs = _twin_bn(u)
                        seq.append(m)
                        seq.append(torch.nn.ReLU())
                    self.pairs += pairs
                if not blk.has_bn:
                    raise AssertionError("conv blocks are expected to carry batch norm")
                self.mods[nd.name] = torch.nn.Sequential(*seq)
            elif nd.kind == "transpose-conv":
                m, pairs = _twin_tconv(blk.up)
                self.pairs += pairs
                seq = [m]
                if blk.bn is not None:
                    mb, pb = _twin_bn(blk.bn)
                    self.pairs += pb
                    seq.append(mb)
                seq.append(torch.nn.ReLU())
                self.mods[nd.name] = torch.nn.Sequential(*seq)
            elif nd.kind == "maxpool":
                seq = [torch.nn.MaxPool2d(2, 2)]
                if blk.bn is not None:
                    mb, pb = _twin_bn(blk.bn)
                    self.pairs += pb
                    seq.append(mb)
                self.mods[nd.name] = torch.nn.Sequential(*seq)
            elif nd.kind == "output-1x1":
                m, pairs = _twin_conv(blk.conv)
                self.pairs += pairs
                self.mods[nd.name] = m

    def forward(self, x):
        cache = {"__input__": x}

        def ev(name):
            if name not in cache:
                nd = self.by_name[name]
                srcs = [ev(s) for s in nd.inputs]
                if nd.kind == "concat-crop":
                    th = min(s.shape[2] for s in srcs)
                    tw = min(s.shape[3] for s in srcs)
                    parts = []
                    for s in srcs:
                        oh = (s.shape[2] - th) // 2
                        ow = (s.shape[3] - tw) // 2
                        parts.append(s[:, :, oh : oh + th, ow : ow + tw])
                    cache[name] = torch.cat(parts, dim=1)
                else:
                    cache[name] = self.mods[name](srcs[0])
            return cache[name]

        return ev(self.graph_nodes[-1].name)


CASES = [
    ("sUNet", "online", 64, 18),
    ("sDeepLab", "online", 64, 18),
    ("BowNet", "online", 64, 18),
    ("BowNet", "offline", 64, 18),
    ("wBowNet", "online", 128, 82),
    ("wBowNet", "offline", 128, 82),
]


@pytest.mark.parametrize("kind,variant,extent,out_extent", CASES)
def test_loss_and_grads_match_reference(kind, variant, extent, out_extent):
    cfg = NetConfig(filter_base=2, seed=29, dtype=np.float64, input_extent=extent,
                    variant=variant)
    net = build(kind, cfg)  # training mode: exercises batch-stat backward
    twin = Twin(net).train()
    rng = np.random.default_rng(43)
    xnp = rng.random((2, 1, extent, extent))
    ynp = (rng.random((2, 1, out_extent, out_extent)) > 0.5).astype(np.float64)

    loss = bce_from_logits(forward_logits(net, Tensor(xnp)), ynp)
    net.zero_grad()
    loss.backward()

    xt = torch.from_numpy(xnp)
    lt = torch.nn.functional.binary_cross_entropy_with_logits(
        twin(xt), torch.from_numpy(ynp)
    )
    lt.backward()

    assert abs(float(loss.data) - lt.item()) < 1e-10
    checked = 0
    for mine, theirs in twin.pairs:
        g_mine = mine.grad if mine.grad is not None else np.zeros_like(mine.data)
        g_ref = theirs.grad.numpy() if theirs.grad is not None else np.zeros_like(g_mine)
        assert np.allclose(g_mine, g_ref, rtol=1e-7, atol=1e-10), f"grad mismatch #{checked}"
        checked += 1
    assert checked == sum(1 for _ in net.parameters())
