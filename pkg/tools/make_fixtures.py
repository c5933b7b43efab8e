"""Regenerate the model and dataset fixtures under tests/assets.

Needs scikit-learn (``pip install .[fixtures]``).  The outputs are committed,
so the test suite itself never trains anything.

* ``tiny``: a 2-input, 12-ReLU, 3-class network with random weights whose
  first-layer hyperplanes cross the unit square; train split is a 41x41
  grid labelled by the network, test split 50 uniform points.
* ``digits``: an MLP (64-32-16-10) trained on the 8x8 digits data scaled
  to [0, 1].
"""

import argparse
from pathlib import Path

import numpy as np

from lrattack.io import Dataset, save_dataset, save_model
from lrattack.net import Dense, Network, ReLU, classify_batch


def tiny_network(seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    w1 = rng.normal(size=(6, 2)) * 3
    b1 = -(w1 @ rng.uniform(0.2, 0.8, size=(2, 6))).diagonal()
    w2 = rng.normal(size=(6, 6))
    b2 = rng.normal(size=6) * 0.5
    w3 = rng.normal(size=(3, 6))
    b3 = rng.normal(size=3) * 0.5
    layers = [Dense(w1, b1), ReLU(), Dense(w2, b2), ReLU(), Dense(w3, b3)]
    # round through float32 so the saved model is exactly this network
    layers = [Dense(l.weight.astype(np.float32), l.bias.astype(np.float32)) if isinstance(l, Dense) else l
              for l in layers]
    return Network(layers, (2,), dtype)


def make_tiny(out):
    net = tiny_network(0)
    grid = np.stack(np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41)), -1).reshape(-1, 2)
    test = np.random.default_rng(5).uniform(size=(50, 2))
    save_model(net, out / "tiny.json")
    save_dataset(Dataset(grid.astype(np.float32), classify_batch(net, grid).astype(np.uint8), "train"),
                 out / "tiny_train.json")
    test = test.astype(np.float32)
    save_dataset(Dataset(test, classify_batch(net, test).astype(np.uint8), "test"), out / "tiny_test.json")


def make_digits(out):
    from sklearn.datasets import load_digits
    from sklearn.neural_network import MLPClassifier

    X, y = load_digits(return_X_y=True)
    X = (X / 16.0).astype(np.float32)
    order = np.random.default_rng(0).permutation(len(y))
    X, y = X[order], y[order]
    n_train = 1500
    clf = MLPClassifier(hidden_layer_sizes=(32, 16), activation="relu", alpha=1e-3,
                        max_iter=600, random_state=0)
    clf.fit(X[:n_train], y[:n_train])
    layers = []
    for i, (w, b) in enumerate(zip(clf.coefs_, clf.intercepts_)):
        if i:
            layers.append(ReLU())
        layers.append(Dense(w.T.astype(np.float32), b.astype(np.float32)))
    net = Network(layers, (64,), np.float32)
    acc = float((classify_batch(net, X[n_train:]) == y[n_train:]).mean())
    print(f"digits MLP test accuracy {acc:.3f}")
    save_model(net, out / "digits_mlp.json")
    save_dataset(Dataset(X[:n_train], y[:n_train].astype(np.uint8), "train"), out / "digits_train.json")
    save_dataset(Dataset(X[n_train:], y[n_train:].astype(np.uint8), "test"), out / "digits_test.json")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests" / "assets")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    make_tiny(args.out)
    make_digits(args.out)


if __name__ == "__main__":
    main()
