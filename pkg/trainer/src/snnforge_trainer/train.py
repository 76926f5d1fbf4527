"""Train the reference CNN on MNIST-format IDX data and export it."""

import argparse
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import dataset
from .export import export_asnn
from .model import DigitCNN


@dataclass
class TrainConfig:
    epochs: int = 3
    seed: int = 42
    batch_size: int = 128
    lr: float = 1e-3
    # shrinks weights and with them the activation outliers that would
    # otherwise inflate the normalization scales of the converted net
    weight_decay: float = 5e-4
    accuracy_floor: float = 0.985


def _to_tensor(images):
    return torch.tensor(images[:, None].astype(np.float32) / 255.0)


def evaluate(model: nn.Module, images, labels, batch_size=512) -> float:
    model.eval()
    x = _to_tensor(images)
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            pred = model(x[i : i + batch_size]).argmax(1).numpy()
            hits += int((pred == labels[i : i + batch_size]).sum())
    return hits / len(x)


def train(cfg: TrainConfig, train_images, train_labels, test_images, test_labels,
          log=print):
    """Train a DigitCNN; returns (model, test_accuracy)."""
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    model = DigitCNN()
    opt = torch.optim.AdamW(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    x = _to_tensor(train_images)
    y = torch.tensor(train_labels.astype(np.int64))
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
        acc = evaluate(model, test_images, test_labels)
        log(f"epoch {epoch + 1}/{cfg.epochs}: test accuracy {acc:.4f}")
    return model, evaluate(model, test_images, test_labels)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Train the reference CNN and "
                                                 "export it to ASNN")
    parser.add_argument("--data-dir", default="data")
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", default="models/digits_cnn.asnn")
    parser.add_argument("--checkpoint", default=None,
                        help="also save the torch state dict here")
    parser.add_argument("--accuracy-floor", type=float, default=0.985)
    args = parser.parse_args(argv)

    train_pair = dataset.find_pair(args.data_dir, "train")
    test_pair = dataset.find_pair(args.data_dir, "test")
    train_images, train_labels = dataset.load_pair(*train_pair)
    test_images, test_labels = dataset.load_pair(*test_pair)

    cfg = TrainConfig(epochs=args.epochs, seed=args.seed,
                      accuracy_floor=args.accuracy_floor)
    model, acc = train(cfg, train_images, train_labels, test_images, test_labels)

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    meta = {"epochs": args.epochs, "seed": args.seed,
            "test_accuracy": round(acc, 6), "arch": "DigitCNN"}
    export_asnn(model, args.out, meta=meta)
    if args.checkpoint:
        torch.save(model.state_dict(), args.checkpoint)
    print(f"test accuracy {acc:.4f}; exported to {args.out}")

    if args.epochs > 0 and acc < cfg.accuracy_floor:
        print(f"accuracy {acc:.4f} below floor {cfg.accuracy_floor}")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
