"""Mini-batch training with Adam."""

from dataclasses import dataclass

import numpy as np

from .data import batch_iter
from .losses import compute_loss
from .models import forward
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def train_epoch(model, dataset, loss_spec, state, batch_size, shuffle_seed, epoch):
    """One pass over ``dataset``; returns the example-weighted mean training loss."""
    params = {name: p.data for name, p in model.params.items()}
    total, count = 0.0, 0
    for images, labels in batch_iter(dataset, batch_size, shuffle_seed, epoch):
        model.zero_grad()
        with Tape() as tape:
            loss = compute_loss(loss_spec, forward(model, Tensor(images)), labels)
        tape.backward(loss)
        grads = {name: p.grad for name, p in model.params.items()}
        adam_step(params, grads, state)
        total += float(loss.data) * len(labels)
        count += len(labels)
    model.zero_grad()
    return total / max(count, 1)


def train(model, dataset, loss_spec, config=TrainConfig(), shuffle_seed=0, on_epoch=None):
    """Train ``model`` in place for ``config.epochs`` epochs.

    ``on_epoch(epoch, train_loss)`` is called after every epoch (1-based).
    Returns the list of per-epoch training losses.
    """
    model.unfreeze()
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    losses = []
    for epoch in range(1, config.epochs + 1):
        loss = train_epoch(model, dataset, loss_spec, state, config.batch_size, shuffle_seed, epoch)
        losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return losses


def param_checksum(model):
    """Order-sensitive digest of the parameter bytes, for immutability checks."""
    import hashlib

    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
