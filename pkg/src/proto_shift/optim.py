"""Optimizers and learning-rate schedules over autodiff tensors."""
import numpy as np


class StepDecay:
    """``lr(t) = base * factor ** (t // every)``."""

    def __init__(self, base, every, factor):
        if base <= 0:
            raise ValueError("learning rate must be positive")
        if every <= 0:
            raise ValueError("decay period must be positive")
        if not 0.0 < factor <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        self.base = base
        self.every = every
        self.factor = factor

    def __call__(self, t):
        return self.base * self.factor ** (t // self.every)


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(kind, params, lr, momentum=0.9, betas=(0.9, 0.999), eps=1e-8):
    if kind == "sgd":
        return SGD(params, lr, momentum)
    if kind == "adam":
        return Adam(params, lr, betas, eps)
    raise ValueError(f"unknown optimizer {kind!r}")
