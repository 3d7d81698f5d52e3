#!/usr/bin/env python3
"""Train the small checked-in classifier fixture and export it.

Trains a conv-bn-relu x2 + inner-product net with torch on the deterministic
synthetic dataset from quantnet.data, then writes the FP32 model document and
weight blob to tests/fixtures/tinynet.model / .bin.  Development tooling
only; the package itself never imports torch.

Usage: python tools/train_fixture.py [--epochs 30] [--out tests/fixtures]
"""

import argparse
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

import quantnet as qn
from quantnet.data import make_synthetic


class TinyNet(nn.Module):
    def __init__(self, classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(8)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(16)
        self.fc = nn.Linear(16 * 2 * 2, classes)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = torch.max_pool2d(x, 2)
        x = torch.relu(self.bn2(self.conv2(x)))
        x = torch.max_pool2d(x, 2)
        return self.fc(x.flatten(1))


def train(epochs: int) -> TinyNet:
    torch.manual_seed(0)
    x, y = make_synthetic("train", 4000)
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    net = TinyNet()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    loss_fn = nn.CrossEntropyLoss()
    net.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(xt))
        total = 0.0
        for i in range(0, len(xt), 128):
            idx = perm[i : i + 128]
            opt.zero_grad()
            loss = loss_fn(net(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        if (epoch + 1) % 5 == 0:
            print(f"epoch {epoch + 1}: loss {total / len(xt):.4f}")
    net.eval()
    with torch.no_grad():
        ex, ey = make_synthetic("test", 1000)
        acc = (net(torch.from_numpy(ex)).argmax(1) == torch.from_numpy(ey)).float().mean()
    print(f"torch eval top-1: {float(acc) * 100:.2f}%")
    return net


def export(net: TinyNet, out_dir: Path) -> None:
    g = qn.Graph("tinynet")
    g.metadata["task"] = "synthetic-10-class"
    g.add("in0", qn.Input((1, 3, 8, 8)), [], ["img"])

    def tensor(name, value):
        g.weights[name] = value.detach().numpy().astype(np.float32)
        return name

    def bn_refs(prefix, bn):
        return dict(
            mean=tensor(f"{prefix}_mean", bn.running_mean),
            var=tensor(f"{prefix}_var", bn.running_var),
            scale=tensor(f"{prefix}_scale", bn.weight),
            shift=tensor(f"{prefix}_shift", bn.bias),
            eps=bn.eps,
        )

    g.add("conv1", qn.Convolution(8, (3, 3), (1, 1), (1, 1),
                                  weight=tensor("conv1_w", net.conv1.weight)),
          ["img"], ["c1"])
    g.add("bn1", qn.BatchNorm(**bn_refs("bn1", net.bn1)), ["c1"], ["n1"])
    g.add("relu1", qn.ReLU(), ["n1"], ["r1"])
    g.add("pool1", qn.Pooling("max", (2, 2), (2, 2)), ["r1"], ["p1"])
    g.add("conv2", qn.Convolution(16, (3, 3), (1, 1), (1, 1),
                                  weight=tensor("conv2_w", net.conv2.weight)),
          ["p1"], ["c2"])
    g.add("bn2", qn.BatchNorm(**bn_refs("bn2", net.bn2)), ["c2"], ["n2"])
    g.add("relu2", qn.ReLU(), ["n2"], ["r2"])
    g.add("pool2", qn.Pooling("max", (2, 2), (2, 2)), ["r2"], ["p2"])
    g.add("fc", qn.InnerProduct(10, weight=tensor("fc_w", net.fc.weight),
                                bias=tensor("fc_b", net.fc.bias)),
          ["p2"], ["logits"])
    g.validate()

    out_dir.mkdir(parents=True, exist_ok=True)
    qn.save_model(g, out_dir / "tinynet.model")
    print(f"wrote {out_dir / 'tinynet.model'}")

    # sanity: the exported graph agrees with torch
    ex, ey = make_synthetic("test", 200)
    ours = qn.run_fp32(g, ex).outputs["logits"].reshape(200, 10)
    with torch.no_grad():
        theirs = net(torch.from_numpy(ex)).numpy()
    print(f"max |quantnet - torch| on logits: {np.abs(ours - theirs).max():.2e}")
    acc = float(np.mean(ours.argmax(1) == ey)) * 100
    print(f"exported model top-1: {acc:.2f}%")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", type=Path, default=Path(__file__).parent.parent / "tests/fixtures")
    args = ap.parse_args()
    export(train(args.epochs), args.out)


if __name__ == "__main__":
    main()
