"""Compare the analytic meta-gradient with central finite differences on a toy.

The objective is L_mtr(w) + L_mte(w') where w' is one fresh-moment Adam step
on L_mtr. Prints the relative error for a few inner learning rates and eps
values, with and without the second-order path.
"""

import torch

from m3l.encoder import DTYPE
from m3l.trainer import bilevel_gradient, inner_update


def meta_train(w):
    return (w["a"] - 1) ** 2 + 0.5 * w["a"] * w["b"] + torch.sin(w["b"])


def meta_test(w):
    return (w["a"] * w["b"] - 0.3) ** 2 + torch.exp(0.2 * w["a"])


def params(a, b):
    return {"a": torch.tensor(a, dtype=DTYPE, requires_grad=True), "b": torch.tensor(b, dtype=DTYPE, requires_grad=True)}


def objective(a, b, lr, eps):
    w = params(a, b)
    return (meta_train(w) + meta_test(inner_update(w, meta_train(w), lr, eps=eps))).item()


def main() -> None:
    x, h = (0.4, -0.7), 1e-6
    print(f"{'lr':>8} {'eps':>8} {'rel err (full)':>15} {'|full - first order|':>21}")
    for lr in (0.01, 0.05, 0.2):
        for eps in (1e-8, 1e-2, 1.0):
            _, _, g = bilevel_gradient(params(*x), meta_train, meta_test, lr, eps=eps)
            _, _, fo = bilevel_gradient(params(*x), meta_train, meta_test, lr, eps=eps, first_order=True)
            g, fo = torch.stack(g), torch.stack(fo)
            fd = torch.tensor(
                [
                    (objective(x[0] + h, x[1], lr, eps) - objective(x[0] - h, x[1], lr, eps)) / (2 * h),
                    (objective(x[0], x[1] + h, lr, eps) - objective(x[0], x[1] - h, lr, eps)) / (2 * h),
                ],
                dtype=DTYPE,
            )
            rel = ((g - fd).norm() / fd.norm()).item()
            print(f"{lr:>8g} {eps:>8g} {rel:>15.2e} {(g - fo).norm().item():>21.2e}")


if __name__ == "__main__":
    main()
