"""Finite-difference verification of every differentiable operation.

Each case builds a small float64 graph from seeded leaf tensors and compares
the tape's gradients against central differences, element by element, via
:func:`cloudtrack.nn.grad_check`.  The registry covers three layers:

* every primitive op of the tensor library,
* the neighborhood-attention summaries (bi-directional, point-to-neighborhood
  baseline, and the optional offset-bias arm) and the refinement transformer,
* the full discounted training loss across refinement iterations.

The iteration inputs of the full-loss case are recorded once at the base
parameters and then held fixed: refinement iterations consume *detached*
estimates by design, so the implemented gradient treats each iteration's
starting state as a constant, and the finite differences must probe that same
function.

The ``gradcheck`` CLI command and the test suite both run :func:`run_checks`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import n2n, nn, trajectory
from .refiner import RefinerConfig, refine_once
from .training import LossConfig, compute_loss, discounted_loss

__all__ = ["CheckOutcome", "case_names", "run_checks", "RTOL"]

RTOL = 1e-4  # repository-wide gradient tolerance (relative, float64)


@dataclass
class CheckOutcome:
    name: str
    result: nn.GradCheckResult
    seconds: float

    def line(self) -> str:
        status = "ok  " if self.result.ok else "FAIL"
        return (
            f"{status} {self.name:<28} max rel err {self.result.max_rel_err:.3e}"
            f"  ({self.seconds:.2f}s)"
        )


# every case returns (fn, inputs) for nn.grad_check
_CASES: dict[str, Callable[[], tuple[Callable[[], nn.Tensor], dict[str, nn.Tensor]]]] = {}


def _case(name: str):
    def deco(builder):
        _CASES[name] = builder
        return builder

    return deco


def _leaf(rng: np.random.Generator, shape, scale: float = 1.0) -> nn.Tensor:
    return nn.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _projector(rng: np.random.Generator, shape) -> np.ndarray:
    """Fixed random weights that turn an op output into a sensitive scalar."""
    return rng.normal(size=shape)


def _scalarized(op: Callable[..., nn.Tensor], *leaves: nn.Tensor, seed: int = 99):
    """Wrap ``op`` so the checked function is sum(op(...) * fixed_random)."""
    rng = np.random.default_rng(seed)
    out_shape = op(*leaves).data.shape
    proj = _projector(rng, out_shape)

    def fn() -> nn.Tensor:
        return nn.reduce_sum(nn.mul(op(*leaves), nn.Tensor(proj)))

    return fn


# -- primitive ops ---------------------------------------------------------


@_case("op:add")
def _build_add():
    rng = np.random.default_rng(1)
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))  # broadcast across rows
    return _scalarized(nn.add, a, b), {"a": a, "b": b}


@_case("op:sub")
def _build_sub():
    rng = np.random.default_rng(2)
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 1))
    return _scalarized(nn.sub, a, b), {"a": a, "b": b}


@_case("op:mul")
def _build_mul():
    rng = np.random.default_rng(3)
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (3, 4))
    return _scalarized(nn.mul, a, b), {"a": a, "b": b}


@_case("op:neg")
def _build_neg():
    rng = np.random.default_rng(4)
    a = _leaf(rng, (5,))
    return _scalarized(nn.neg, a), {"a": a}


@_case("op:matmul")
def _build_matmul():
    rng = np.random.default_rng(5)
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 5))
    return _scalarized(nn.matmul, a, b), {"a": a, "b": b}


@_case("op:reshape")
def _build_reshape():
    rng = np.random.default_rng(6)
    a = _leaf(rng, (3, 4))
    return _scalarized(lambda t: nn.reshape(t, (2, 6)), a), {"a": a}


@_case("op:transpose")
def _build_transpose():
    rng = np.random.default_rng(7)
    a = _leaf(rng, (2, 3, 4))
    return _scalarized(lambda t: nn.transpose(t, (2, 0, 1)), a), {"a": a}


@_case("op:broadcast_to")
def _build_broadcast():
    rng = np.random.default_rng(8)
    a = _leaf(rng, (1, 4))
    return _scalarized(lambda t: nn.broadcast_to(t, (3, 4)), a), {"a": a}


@_case("op:concat")
def _build_concat():
    rng = np.random.default_rng(9)
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    return _scalarized(lambda x, y: nn.concat([x, y], axis=1), a, b), {"a": a, "b": b}


@_case("op:stack")
def _build_stack():
    rng = np.random.default_rng(10)
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    return _scalarized(lambda x, y: nn.stack([x, y], axis=1), a, b), {"a": a, "b": b}


@_case("op:index")
def _build_index():
    rng = np.random.default_rng(11)
    a = _leaf(rng, (4, 5))
    return _scalarized(lambda t: nn.index(t, np.s_[1:3, ::2]), a), {"a": a}


@_case("op:gather_rows")
def _build_gather():
    rng = np.random.default_rng(12)
    a = _leaf(rng, (5, 3))
    idx = np.array([0, 2, 2, 4, 1])  # repeated row: backward must accumulate
    return _scalarized(lambda t: nn.gather_rows(t, idx), a), {"a": a}


@_case("op:reduce_sum")
def _build_reduce_sum():
    rng = np.random.default_rng(13)
    a = _leaf(rng, (3, 4))
    return _scalarized(lambda t: nn.reduce_sum(t, axis=1), a), {"a": a}


@_case("op:mean")
def _build_mean():
    rng = np.random.default_rng(14)
    a = _leaf(rng, (3, 4))
    return _scalarized(lambda t: nn.mean(t, axis=0), a), {"a": a}


@_case("op:sin")
def _build_sin():
    rng = np.random.default_rng(15)
    a = _leaf(rng, (3, 4))
    return _scalarized(nn.sin, a), {"a": a}


@_case("op:cos")
def _build_cos():
    rng = np.random.default_rng(16)
    a = _leaf(rng, (3, 4))
    return _scalarized(nn.cos, a), {"a": a}


@_case("op:exp")
def _build_exp():
    rng = np.random.default_rng(17)
    a = _leaf(rng, (3, 4), scale=0.5)
    return _scalarized(nn.exp, a), {"a": a}


@_case("op:log")
def _build_log():
    rng = np.random.default_rng(18)
    a = nn.Tensor(rng.uniform(0.5, 3.0, size=(3, 4)), requires_grad=True)
    return _scalarized(nn.log, a), {"a": a}


@_case("op:sqrt")
def _build_sqrt():
    rng = np.random.default_rng(19)
    a = nn.Tensor(rng.uniform(0.5, 3.0, size=(3, 4)), requires_grad=True)
    return _scalarized(nn.sqrt, a), {"a": a}


@_case("op:erf")
def _build_erf():
    rng = np.random.default_rng(20)
    a = _leaf(rng, (3, 4))
    return _scalarized(nn.erf, a), {"a": a}


@_case("op:sigmoid")
def _build_sigmoid():
    rng = np.random.default_rng(21)
    a = _leaf(rng, (3, 4), scale=2.0)
    return _scalarized(nn.sigmoid, a), {"a": a}


@_case("op:gelu")
def _build_gelu():
    rng = np.random.default_rng(22)
    a = _leaf(rng, (3, 4), scale=2.0)
    return _scalarized(nn.gelu, a), {"a": a}


@_case("op:softmax")
def _build_softmax():
    rng = np.random.default_rng(23)
    a = _leaf(rng, (3, 5), scale=2.0)
    return _scalarized(nn.softmax, a), {"a": a}


@_case("op:layer_norm")
def _build_layer_norm():
    rng = np.random.default_rng(24)
    a = _leaf(rng, (3, 6))
    return _scalarized(nn.layer_norm, a), {"a": a}


@_case("op:l2_norm")
def _build_l2_norm():
    rng = np.random.default_rng(25)
    # keep rows well away from the origin: the norm is not differentiable at 0
    a = nn.Tensor(rng.normal(size=(4, 3)) + np.array([2.0, -2.0, 2.0]), requires_grad=True)
    return _scalarized(nn.l2_norm, a), {"a": a}


@_case("op:bce_with_logits")
def _build_bce():
    rng = np.random.default_rng(26)
    a = _leaf(rng, (3, 4), scale=3.0)
    targets = rng.uniform(0.0, 1.0, size=(3, 4))
    return _scalarized(lambda t: nn.bce_with_logits(t, targets), a), {"a": a}


@_case("op:linear")
def _build_linear():
    rng = np.random.default_rng(27)
    x, w, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
    return _scalarized(nn.linear, x, w, b), {"x": x, "w": w, "b": b}


@_case("op:conv2d")
def _build_conv2d():
    rng = np.random.default_rng(28)
    x, w, b = _leaf(rng, (5, 4, 2)), _leaf(rng, (3, 3, 2, 3)), _leaf(rng, (3,))
    return _scalarized(lambda *ts: nn.conv2d(*ts, stride=2), x, w, b), {"x": x, "w": w, "b": b}


@_case("op:fourier_encode")
def _build_fourier():
    rng = np.random.default_rng(29)
    a = _leaf(rng, (3, 2), scale=0.3)
    return _scalarized(lambda t: nn.fourier_encode(t, num_bands=2), a), {"a": a}


# -- neighborhood attention and refiner -------------------------------------


def _micro_neighborhood(mode: str, offset_bias: bool = False) -> n2n.NeighborhoodConfig:
    return n2n.NeighborhoodConfig(
        k=2, num_levels=2, channels=4, num_heads=2, num_bands=1,
        attention_mode=mode, offset_attention_bias=offset_bias,
    )


def _micro_bags(rng: np.random.Generator, q: int, t: int, k: int, cf: int) -> n2n.LevelBags:
    return n2n.LevelBags(
        context_feats=nn.Tensor(rng.normal(size=(q, t, k, cf)), requires_grad=True),
        context_offsets=rng.normal(size=(q, t, k, 3)) * 0.3,
        support_feats=nn.Tensor(rng.normal(size=(q, k, cf)), requires_grad=True),
        support_offsets=rng.normal(size=(q, k, 3)) * 0.3,
        query_feats=nn.Tensor(rng.normal(size=(q, cf)), requires_grad=True),
    )


def _summaries_case(mode: str, offset_bias: bool, seed: int):
    rng = np.random.default_rng(seed)
    q, t, k, cf = 2, 3, 2, 3
    cfg = _micro_neighborhood(mode, offset_bias)
    bags = [_micro_bags(rng, q, t, k, cf) for _ in range(cfg.num_levels)]
    params = nn.ParamStore(seed=seed, dtype=np.float64)
    proj = _projector(rng, (q, t, cfg.summary_width))

    def fn() -> nn.Tensor:
        out = n2n.summarize_levels(params, cfg, bags)
        return nn.reduce_sum(nn.mul(out, nn.Tensor(proj)))

    fn()  # materialize every parameter before collecting the input set
    inputs: dict[str, nn.Tensor] = {}
    for lvl, b in enumerate(bags):
        inputs[f"context{lvl}"] = b.context_feats
        inputs[f"support{lvl}"] = b.support_feats
        inputs[f"query{lvl}"] = b.query_feats
    for name, p in params.items():
        inputs[f"param:{name}"] = p
    return fn, inputs


@_case("module:n2n")
def _build_n2n():
    return _summaries_case("n2n", False, seed=41)


@_case("module:p2n")
def _build_p2n():
    return _summaries_case("p2n", False, seed=42)


@_case("module:n2n_offset_bias")
def _build_n2n_bias():
    return _summaries_case("n2n", True, seed=43)


@_case("module:refiner")
def _build_refiner():
    rng = np.random.default_rng(44)
    q, t, w_in = 2, 3, 10
    cfg = RefinerConfig(width=8, depth=1, num_heads=2, num_virtual=2,
                        iterations=1, num_bands=1)
    tokens = nn.Tensor(rng.normal(size=(q, t, w_in)), requires_grad=True)
    params = nn.ParamStore(seed=44, dtype=np.float64)
    proj_p = _projector(rng, (q, t, 3))
    proj_l = _projector(rng, (q, t))

    def fn() -> nn.Tensor:
        dp, dl = refine_once(params, cfg, tokens)
        return nn.add(
            nn.reduce_sum(nn.mul(dp, nn.Tensor(proj_p))),
            nn.reduce_sum(nn.mul(dl, nn.Tensor(proj_l))),
        )

    fn()
    # the output head initializes to zero so the refiner starts as identity;
    # randomize it here, otherwise no gradient reaches the upstream blocks
    head = params.parameter("refiner.head.weight", (cfg.width, 4))
    head.data = rng.normal(size=head.data.shape) * 0.3
    inputs = {"tokens": tokens}
    for name, p in params.items():
        inputs[f"param:{name}"] = p
    return fn, inputs


# -- full discounted training loss -------------------------------------------


@_case("module:full_loss")
def _build_full_loss():
    """Discounted multi-iteration loss, end to end.

    Refinement iterations consume detached states, so the checked function
    records each iteration's input state at the base parameters once and
    keeps them fixed; the finite differences then probe exactly the function
    whose gradient the tape computes.
    """
    rng = np.random.default_rng(45)
    q, t, k, cf = 2, 3, 2, 3
    n_cfg = n2n.NeighborhoodConfig(k=k, num_levels=1, channels=4, num_heads=2, num_bands=1)
    r_cfg = RefinerConfig(width=8, depth=1, num_heads=2, num_virtual=2,
                          iterations=2, num_bands=1)
    loss_cfg = LossConfig(num_iterations=2)
    bags = [_micro_bags(rng, q, t, k, cf)]
    params = nn.ParamStore(seed=45, dtype=np.float64)
    pixels = rng.uniform(0.1, 0.9, size=(q, t, 2))
    sigma = 1.7
    gt = rng.normal(size=(q, t, 3)) * 2.0
    vis = rng.uniform(size=(q, t)) > 0.3
    sup = np.ones((q, t), dtype=bool)
    depths = rng.uniform(0.5, 3.0, size=(q, t))

    def iteration_loss(state: trajectory.TrajectoryState) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
        summaries = n2n.summarize_levels(params, n_cfg, bags)
        tokens = trajectory.assemble_tokens(summaries, state, pixels, num_bands=r_cfg.num_bands)
        dp, dl = refine_once(params, r_cfg, tokens)
        pred_pos = nn.add(nn.Tensor(state.positions), dp)
        pred_logit = nn.add(nn.Tensor(state.vis_logits), dl)
        unscaled = nn.mul(pred_pos, np.float64(sigma))
        return compute_loss(unscaled, pred_logit, gt, vis, sup, depths, loss_cfg), pred_pos, pred_logit

    # materialize parameters and give the zero-initialized head real values,
    # then freeze the per-iteration input states at these base parameters
    state0 = trajectory.initialize_window(rng.normal(size=(q, 3)), t)
    iteration_loss(state0)
    head = params.parameter("refiner.head.weight", (r_cfg.width, 4))
    head.data = rng.normal(size=head.data.shape) * 0.2
    states = [state0]
    for _ in range(loss_cfg.num_iterations - 1):
        _, pred_pos, pred_logit = iteration_loss(states[-1])
        states.append(trajectory.TrajectoryState(pred_pos.data.copy(), pred_logit.data.copy()))

    def fn() -> nn.Tensor:
        losses = [iteration_loss(s)[0] for s in states]
        return discounted_loss(
            losses, loss_cfg.iteration_discount, loss_cfg.loss_multiplier
        )

    inputs: dict[str, nn.Tensor] = {
        "context": bags[0].context_feats,
        "support": bags[0].support_feats,
    }
    for name, p in params.items():
        inputs[f"param:{name}"] = p
    return fn, inputs


# -- driver ------------------------------------------------------------------


def case_names() -> list[str]:
    return list(_CASES)


def run_checks(
    names: list[str] | None = None,
    rtol: float = RTOL,
    progress: Callable[[CheckOutcome], None] | None = None,
) -> list[CheckOutcome]:
    """Run the named cases (default: all) and return their outcomes."""
    outcomes: list[CheckOutcome] = []
    for name in names if names is not None else case_names():
        builder = _CASES.get(name)
        if builder is None:
            raise KeyError(f"unknown gradient check {name!r}; have {case_names()}")
        start = time.perf_counter()
        fn, inputs = builder()
        result = nn.grad_check(fn, inputs, rtol=rtol)
        outcome = CheckOutcome(name, result, time.perf_counter() - start)
        outcomes.append(outcome)
        if progress is not None:
            progress(outcome)
    return outcomes
