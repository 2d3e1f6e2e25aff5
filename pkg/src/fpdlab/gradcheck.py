"""Finite-difference verification of every autodiff primitive, plus the
straight-through and drift gradient identities. Backs the gradcheck command
and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .drift import DriftBatch, DriftConfig, analytic_student_grad, drift_loss
from .rng import RngStream

REL_TOL = 1e-4
ABS_FLOOR = 1e-6
IDENTITY_TOL = 1e-10


def numeric_grad(fn, values: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at `values`."""
    base = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        hi = base.copy()
        hi[ix] += eps
        lo = base.copy()
        lo[ix] -= eps
        grad[ix] = (fn(hi) - fn(lo)) / (2.0 * eps)
        it.iternext()
    return grad


def fd_mismatch(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest violation ratio of |a - n| <= REL_TOL*|n| + ABS_FLOOR."""
    tolerance = REL_TOL * np.abs(numeric) + ABS_FLOOR
    return float((np.abs(analytic - numeric) / tolerance).max())


@dataclass
class CheckRow:
    name: str
    max_err: float      # worst |analytic - numeric| (or identity deviation)
    violation: float    # >1 means outside tolerance
    passed: bool


def _positive(rng, shape):
    return 0.5 + rng.random(shape)


def _away_from_zero(rng, shape):
    vals = rng.normal(0.0, 1.0, shape)
    return np.where(np.abs(vals) < 0.1, np.sign(vals) * 0.1 + vals, vals)


# per-op input builders: list of (make_inputs, apply) over three shape scales
def _op_cases(rng: RngStream):
    shapes = [(3,), (2, 4), (2, 3, 4)]
    mat_shapes = [((2, 3), (3, 2)), ((4, 4), (4, 4)), ((2, 3, 4), (4, 5))]

    def elementwise(op, domain=None):
        cases = []
        for s in shapes:
            make = domain or (lambda sh=s: rng.normal(0.0, 1.0, sh))
            cases.append(([make() if domain is None else domain(s)], lambda xs, op=op: op(xs[0])))
        return cases

    cases = {
        "add": [([rng.normal(size=s), rng.normal(size=s)], lambda xs: ad.add(xs[0], xs[1])) for s in shapes]
        + [([rng.normal(size=(3, 4)), rng.normal(size=(1, 4))], lambda xs: ad.add(xs[0], xs[1]))],
        "sub": [([rng.normal(size=s), rng.normal(size=s)], lambda xs: ad.sub(xs[0], xs[1])) for s in shapes],
        "mul": [([rng.normal(size=s), rng.normal(size=s)], lambda xs: ad.mul(xs[0], xs[1])) for s in shapes]
        + [([rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))], lambda xs: ad.mul(xs[0], xs[1]))],
        "div": [([rng.normal(size=s), _away_from_zero(rng, s)], lambda xs: ad.div(xs[0], xs[1])) for s in shapes],
        "matmul": [([rng.normal(size=a), rng.normal(size=b)], lambda xs: ad.matmul(xs[0], xs[1]))
                   for a, b in mat_shapes]
        + [([rng.normal(size=(4, 4)), rng.normal(size=(2, 4, 3))], lambda xs: ad.matmul(xs[0], xs[1]))],
        "exp": elementwise(ad.exp),
        "log": [([_positive(rng, s)], lambda xs: ad.log(xs[0])) for s in shapes]
        + [([_positive(rng, (3,))], lambda xs: ad.log(xs[0], eps=1e-12))],
        "softmax": [([rng.normal(size=s)], lambda xs: ad.softmax(xs[0], axis=-1)) for s in shapes]
        + [([rng.normal(size=(3, 4))], lambda xs: ad.softmax(xs[0], axis=0))],
        "layer_norm": [([rng.normal(size=s)], lambda xs: ad.layer_norm(xs[0])) for s in [(5,), (3, 6), (2, 3, 8)]],
        "relu": [([_away_from_zero(rng, s)], lambda xs: ad.relu(xs[0])) for s in shapes],
        "gelu": elementwise(ad.gelu),
        "gather_rows": [
            ([rng.normal(size=(5, 3))], lambda xs: ad.gather_rows(xs[0], np.array([0, 2, 2, 4]))),
            ([rng.normal(size=(4, 2))], lambda xs: ad.gather_rows(xs[0], np.array([[1, 1], [3, 0]]))),
            ([rng.normal(size=(6,))], lambda xs: ad.gather_rows(xs[0], np.array([5, 0, 3]))),
        ],
        "sum": [([rng.normal(size=(2, 3, 4))], lambda xs, a=a: ad.sum_(xs[0], axis=a)) for a in (None, 0, 2)],
        "mean": [([rng.normal(size=(2, 3, 4))], lambda xs, a=a: ad.mean_(xs[0], axis=a)) for a in (None, 1, 2)],
        "square": elementwise(ad.square),
        "sqrt": [([_positive(rng, s)], lambda xs: ad.sqrt(xs[0])) for s in shapes],
        "concat": [
            ([rng.normal(size=(2, 3)), rng.normal(size=(4, 3))], lambda xs: ad.concat(xs, axis=0)),
            ([rng.normal(size=(2, 3)), rng.normal(size=(2, 1))], lambda xs: ad.concat(xs, axis=1)),
            ([rng.normal(size=(3,)), rng.normal(size=(2,)), rng.normal(size=(1,))],
             lambda xs: ad.concat(xs, axis=0)),
        ],
        "slice": [
            ([rng.normal(size=(6,))], lambda xs: ad.slice_(xs[0], 0, 1, 3)),
            ([rng.normal(size=(4, 5))], lambda xs: ad.slice_(xs[0], 1, 0, 2)),
            ([rng.normal(size=(2, 3, 4))], lambda xs: ad.slice_(xs[0], 2, 1, 2)),
        ],
        "broadcast": [
            ([rng.normal(size=(1, 3))], lambda xs: ad.broadcast_to(xs[0], (4, 3))),
            ([rng.normal(size=(2, 1, 3))], lambda xs: ad.broadcast_to(xs[0], (2, 5, 3))),
            ([rng.normal(size=(4,))], lambda xs: ad.broadcast_to(xs[0], (2, 3, 4))),
        ],
        "reshape": [
            ([rng.normal(size=(6,))], lambda xs: ad.reshape(xs[0], (2, 3))),
            ([rng.normal(size=(2, 3, 4))], lambda xs: ad.reshape(xs[0], (6, 4))),
            ([rng.normal(size=(4, 2))], lambda xs: ad.reshape(xs[0], (8,))),
        ],
        "softplus": elementwise(ad.softplus),
    }
    return cases


def check_primitive(name: str, cases, rng: RngStream, corrupt: bool = False) -> CheckRow:
    worst_err = 0.0
    worst_violation = 0.0
    for raw_inputs, apply in cases:
        probe = None

        def scalar_loss(tensors):
            nonlocal probe
            out = apply(tensors)
            if probe is None:
                probe = rng.normal(0.0, 1.0, out.shape)
            return ad.sum_(ad.mul(out, Tensor(probe)))

        tensors = [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for v in raw_inputs]
        loss = scalar_loss(tensors)
        ad.backward(loss)
        for slot, t in enumerate(tensors):
            analytic = t.grad
            if corrupt:
                analytic = analytic * 1.01 + 1e-3

            def fn(vals, slot=slot):
                trial = [Tensor(x.values) for x in tensors]
                trial[slot] = Tensor(vals)
                return float(scalar_loss(trial).values)

            numeric = numeric_grad(fn, t.values)
            worst_err = max(worst_err, float(np.abs(analytic - numeric).max()))
            worst_violation = max(worst_violation, fd_mismatch(analytic, numeric))
    return CheckRow(name, worst_err, worst_violation, worst_violation <= 1.0)


def check_stop_gradient(rng: RngStream) -> CheckRow:
    x = Tensor(rng.normal(0.0, 1.0, (3, 4)), requires_grad=True)
    forward_identical = np.array_equal(ad.stop_gradient(x).values, x.values)
    loss = ad.sum_(ad.square(ad.sub(x, ad.stop_gradient(x))))
    ad.backward(loss)
    err = float(np.abs(x.grad).max())
    ok = forward_identical and err == 0.0 and float(loss.values) == 0.0
    return CheckRow("stop_gradient", err, 0.0 if ok else np.inf, ok)


def check_ste_identity(rng: RngStream) -> CheckRow:
    """Linear-probe gradient through the straight-through embedding must
    equal the gradient through the soft mixture, and the forward must be
    bit-equal to the hard lookup."""
    from .distill import ste_embed

    K, d, L = 5, 3, 4
    table = rng.normal(0.0, 1.0, (K, d))
    logits = Tensor(rng.normal(0.0, 1.0, (2, L, K)), requires_grad=True)
    tokens = rng.integers(0, K, size=(2, L)).astype(np.int64)
    probe = rng.normal(0.0, 1.0, (2, L, d))

    probs = ad.softmax(logits, axis=-1)
    emb = ste_embed(tokens, probs, table)
    if not np.array_equal(emb.values, table[tokens]):
        return CheckRow("ste_identity", np.inf, np.inf, False)
    ad.backward(ad.sum_(ad.mul(emb, Tensor(probe))))
    grad_ste = logits.grad.copy()

    logits2 = Tensor(logits.values, requires_grad=True)
    soft = ad.matmul(ad.softmax(logits2, axis=-1), Tensor(table))
    ad.backward(ad.sum_(ad.mul(soft, Tensor(probe))))
    err = float(np.abs(grad_ste - logits2.grad).max())
    return CheckRow("ste_identity", err, err / IDENTITY_TOL, err <= IDENTITY_TOL)


def check_drift_gradient(rng: RngStream) -> CheckRow:
    """Autodiff gradient of the drift loss must match the closed form."""
    cfg = DriftConfig(bandwidths=(0.05, 0.3), space="feature", taps=(1, 2), spatial=True)
    worst = 0.0
    for _ in range(3):
        x = Tensor(rng.normal(0.0, 1.0, (4, 2, 2, 3)), requires_grad=True)
        y = rng.normal(0.0, 1.0, (4, 2, 2, 3))
        loss, info = drift_loss(DriftBatch(student=x, targets=y), cfg)
        ad.backward(loss)
        worst = max(worst, float(np.abs(x.grad - analytic_student_grad(info)).max()))
    return CheckRow("drift_gradient", worst, worst / IDENTITY_TOL, worst <= IDENTITY_TOL)


def run_suite(corrupt: str | None = None, seed: int = 2024) -> list[CheckRow]:
    rng = RngStream(seed)
    rows = []
    for name, cases in _op_cases(rng).items():
        rows.append(check_primitive(name, cases, rng, corrupt == name))
    rows.append(check_stop_gradient(rng))
    rows.append(check_ste_identity(rng))
    rows.append(check_drift_gradient(rng))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'primitive':<{width}}  {'max err':>12}  {'vs tol':>10}  status"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_err:>12.3e}  {r.violation:>10.3e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
