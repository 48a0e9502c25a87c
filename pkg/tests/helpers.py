"""Shared test utilities."""

import numpy as np

from premod import autodiff as ad
from premod.ehr import Kind, Label, LabeledPatient, EventRecord, PatientRecord
from premod.model import forward_graph, init_params


def gradient_check(cfg, seed=0, batch=3, h=1e-5):
    """Central-difference check of every parameter of the network.

    Returns (relative errors, absolute errors) over all parameter entries.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for k, p in params.items():
        # non-trivial biases and layer-norm terms so every path carries signal
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(batch, cfg.T, cfg.D))
    y = np.arange(batch) % 2

    def loss_value():
        with ad.no_grad():
            z, _ = forward_graph(x, params, cfg)
            return ad.focal_loss(ad.sigmoid(z), y).item()

    z, _ = forward_graph(x, params, cfg)
    ad.backward(ad.focal_loss(ad.sigmoid(z), y))
    rel, absolute = [], []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        a_flat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_value()
            flat[i] = old - h
            fm = loss_value()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            diff = abs(a_flat[i] - num)
            scale = max(abs(a_flat[i]), abs(num))
            rel.append(diff / scale if scale > 0 else 0.0)
            absolute.append(diff)
    return np.array(rel), np.array(absolute)


def gradient_summary(rel, absolute, rel_tol=1e-4, abs_tol=1e-8):
    ok = rel <= rel_tol
    frac = ok.mean()
    rest_ok = bool(np.all(absolute[~ok] < abs_tol))
    return frac, rest_ok


def patient(pid, events, sex="F", birth_day=0, site="Rochester"):
    evs = tuple(sorted((EventRecord(pid, d, k, c, v) for d, k, c, v in events), key=lambda e: e.day))
    return PatientRecord(pid, sex, birth_day, site, evs)


def dx(day, code):
    return (day, Kind.DIAGNOSIS, code, None)


def lab(day, code, value):
    return (day, Kind.LAB, code, float(value))


def labeled(p, index_day, case=True):
    return LabeledPatient(p, Label.CASE if case else Label.CONTROL, index_day)
