"""Finite-difference checks of every trainable component on tiny float64 instances."""
import numpy as np
import torch

from oracles import finite_difference_grad, rel_error
from tiglab.graph import LastInteractionTracker
from tiglab.heads import FusionMLP, LinkHead, NodeClassHead
from tiglab.prompts import ProjectionPrompt, StaticPrompt, TransformerPrompt, VanillaPrompt
from tiglab.time_encoding import TimeEncoder

TOL = 1e-3


def _randomize(module, gen):
    # zero-initialised tables and layers would make the check trivial
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)


def check(module, forward, inputs=()):
    """Max relative error between autograd and central differences over parameters and inputs."""
    gen = torch.Generator().manual_seed(0)
    weights = None

    def objective():
        nonlocal weights
        out = forward()
        if weights is None:
            weights = torch.randn(out.shape, generator=gen, dtype=torch.float64)
        return (out * weights).sum()

    leaves = [p for p in module.parameters() if p.requires_grad] + list(inputs)
    for x in leaves:
        x.grad = None
    objective().backward()
    worst = 0.0
    for x in leaves:
        analytic = x.grad.detach().numpy().copy() if x.grad is not None else np.zeros(x.shape)
        data = x.detach().numpy()  # shares memory with the tensor

        def f():
            with torch.no_grad():
                return objective().item()

        numeric = finite_difference_grad(f, data)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _t(*shape, gen):
    return torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)


def all_checks() -> dict:
    gen = torch.Generator().manual_seed(1)
    torch.manual_seed(1)
    results = {}

    te = TimeEncoder(4).double()
    dt = torch.tensor([0.5, 3.0, 40.0], dtype=torch.float64, requires_grad=True)
    results["time_encoder"] = check(te, lambda: te(dt), [dt])

    vp = VanillaPrompt(5, 3).double()
    _randomize(vp, gen)
    results["vanilla_prompt"] = check(vp, lambda: vp([0, 2, 2, 4]))

    tp = TransformerPrompt(d_embed=4, d=4, d_e=2, d_t=2, k=3, dropout=0.0).double()
    z_v, z_n, e, c = _t(2, 4, gen=gen), _t(2, 3, 4, gen=gen), _t(2, 3, 2, gen=gen), _t(2, 3, 2, gen=gen)
    mask = torch.tensor([[True, True, False], [False, False, False]])
    results["transformer_prompt"] = check(tp, lambda: tp(z_v, z_n, e, c, mask), [z_v, z_n, e, c])

    pp = ProjectionPrompt(5, 3, 4).double()
    _randomize(pp, gen)
    tracker = LastInteractionTracker(5)
    tracker.update(np.array([0]), np.array([3]), np.array([2.0]))
    code_in = torch.tensor([6.0, 9.0], dtype=torch.float64)
    results["projection_prompt"] = check(pp, lambda: pp([0, 1], te(code_in)))

    for variant, d in (("static_output", 4), ("static_input", 3)):
        sp = StaticPrompt(variant, d).double()
        _randomize(sp, gen)
        x = _t(3, d, gen=gen)
        results[f"{variant}_prompt"] = check(sp, lambda: sp(x), [x])

    rho = FusionMLP(4, 3).double()
    z, p = _t(5, 4, gen=gen), _t(5, 3, gen=gen)
    results["fusion_mlp"] = check(rho, lambda: rho(z, p), [z, p])

    lh = LinkHead(4).double()
    results["link_head"] = check(lh, lambda: lh(z, z.flip(0)), [z])

    nh = NodeClassHead(4, n_classes=3, dropout=0.0).double()
    results["node_head"] = check(nh, lambda: torch.log_softmax(nh(z), -1), [z])
    return results
