import numpy as np

from chartdqn import qnet
from chartdqn.data_ingest import Dataset, build_dataset
from chartdqn.synth_market import SynthSpec, generate


def small_dataset(n_companies=3, n_days=80, seed=0, **kw):
    return build_dataset(generate(SynthSpec(n_companies, n_days, seed=seed)), 32, **kw)


def constant_network(values, seed=0):
    """A network whose output is ``values`` for every input."""
    net = qnet.init_network(seed)
    net.params["fc2.w"][...] = 0.0
    net.params["fc2.b"][...] = values
    return net


def tagged_dataset(n_companies, n_samples, w=4):
    """Charts carry their (company, row) in two pixels so draws can be identified."""
    charts, returns, dates = [], [], []
    for c in range(n_companies):
        ch = np.zeros((n_samples + 2, w, w), dtype=np.uint8)
        ch[:, 0, 0] = c
        ch[:, 0, 1] = np.arange(n_samples + 2)
        charts.append(ch)
        returns.append(np.linspace(-1, 1, n_samples) + c)
        dates.append(np.arange(n_samples).astype("datetime64[D]"))
    return Dataset(tuple(f"C{c}" for c in range(n_companies)), w, tuple(dates), tuple(charts), tuple(returns))
