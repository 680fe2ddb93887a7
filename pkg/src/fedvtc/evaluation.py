from __future__ import annotations

from typing import List, Sequence, Tuple

import torch


@torch.no_grad()
def predict(model, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        preds = [model(x[i:i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)]
    finally:
        if was_training:
            model.train()
    return torch.cat(preds)


def evaluate_generalization(models: Sequence, x: torch.Tensor, y: torch.Tensor, batch_size: int = 500) -> Tuple[List[float], float]:
    """Top-1 accuracy (%) of each model on the held-out set, and their mean."""
    if len(y) == 0:
        raise ValueError("test set is empty")
    accs = [100.0 * float((predict(m, x, batch_size) == y).double().mean()) for m in models]
    return accs, sum(accs) / len(accs)


def per_class_accuracy(model, x: torch.Tensor, y: torch.Tensor, num_classes: int) -> List[float]:
    preds = predict(model, x)
    out = []
    for c in range(num_classes):
        mask = y == c
        out.append(100.0 * float((preds[mask] == c).double().mean()) if mask.any() else float("nan"))
    return out
