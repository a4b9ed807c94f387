import numpy as np
import pytest
import torch

from sdgen.backbone import build_backbone

torch.set_num_threads(1)


def fd_grad(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central finite differences of scalar f at tensor x (x is restored afterwards)."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = float(f())
            flat[i] = old - h
            fm = float(f())
            flat[i] = old
            g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(b.norm(), a.norm(), 1e-12))


@pytest.fixture
def toy_mlp():
    """2-class, 4-dim MLP in float64 with one intercept point (fc1)."""
    return build_backbone("mlp-small", (4,), 2, hidden=(6,), seed=3).double()


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """The 5,000-image MNIST subset bundled with mlxtend, written out as IDX train/t10k files."""
    mlx = pytest.importorskip("mlxtend.data")
    from sdgen.data import write_idx

    x, y = mlx.mnist_data()
    rng = np.random.default_rng(0)
    p = rng.permutation(len(y))
    x = x[p].reshape(-1, 28, 28).astype(np.uint8)
    y = y[p].astype(np.uint8)
    root = tmp_path_factory.mktemp("mnist")
    write_idx(root / "train-images-idx3-ubyte", x[:3000])
    write_idx(root / "train-labels-idx1-ubyte", y[:3000])
    write_idx(root / "t10k-images-idx3-ubyte", x[3000:])
    write_idx(root / "t10k-labels-idx1-ubyte", y[3000:])
    return root


DIGITS_CFG = {"data.source": "train", "data.limit": 1000, "data.val_size": 200,
              "backbone.name": "digits-convnet", "backbone.channels": (16, 32), "backbone.fc": (128, 128),
              "train.iterations": 300, "train.log_every": 100, "meta.k_mc": 4, "meta.lr": 1e-3, "meta.eta": 1e-3}


@pytest.fixture(scope="session")
def digits_run(mnist_idx):
    """A small digits convnet trained in uncertainty mode for 300 iterations (about 90 s)."""
    from sdgen.config import RunConfig
    from sdgen.data import find_idx_pair, load_idx
    from sdgen.harness import resolve_data
    from sdgen.metalearn import run_training

    cfg = RunConfig({**DIGITS_CFG, "data.root": str(mnist_idx)})
    bench = resolve_data(cfg)
    state, _ = run_training(cfg, bench.source, bench.val)
    test = load_idx(*find_idx_pair(mnist_idx, "t10k"), name="t10k")
    return state, bench, test


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
