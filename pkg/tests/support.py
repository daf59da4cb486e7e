"""Shared builders for the engine and acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from motlab import rng as rngmod
from motlab.config import TrainConfig
from motlab.engine import train as T
from motlab.engine.model import ModelParams, SlotParams, forward, observe
from motlab.geometry import Box
from motlab.lifecycle import QuerySlot, Role
from motlab.pld import PseudoLabelSet
from motlab.tgd import build_attention_mask
from motlab.world import DetectorParams, ScenarioConfig, generate_scenario, render_all, simulate_detector


@dataclass
class FrameCase:
    cfg: TrainConfig
    batch: object
    params: ModelParams
    mask: np.ndarray
    suppression: np.ndarray
    label_boxes: np.ndarray
    fm: object


def random_frame_case(seed: int, **overrides) -> FrameCase:
    """One frame with random sizes, perturbed parameters, some live tracks and noisy pseudo labels."""
    rng = np.random.default_rng(seed)
    kw = dict(
        M=int(rng.integers(2, 10)),
        G=int(rng.integers(1, 4)),
        L=int(rng.integers(2, 4)),
        enable_rfs=bool(rng.integers(2)),
        enable_pld=True,
        enable_tgd=True,
        beta=float(rng.uniform(0, 5)),
    )
    kw.update(overrides)
    cfg = TrainConfig(**kw)
    n_targets = int(rng.integers(1, min(5, cfg.M) + 1))
    labels = render_all(generate_scenario(ScenarioConfig(num_targets=n_targets, num_frames=3, birth_prob=0), seed))[1]
    params = ModelParams.init(cfg)
    for k, v in params.arrays().items():
        setattr(params, k, v + rng.normal(0, 0.05, v.shape))
    obs = observe(labels, cfg, rng)
    n_trk = int(rng.integers(0, len(labels) + 1))
    tracks, track_params = [], {}
    for n in range(n_trk):
        b = np.asarray(labels[n].box) + rng.normal(0, 0.02, 4)
        b[2:] = np.abs(b[2:])
        tracks.append(QuerySlot(10 + n, Role.TRACK, Box(*b), labels[n].identity))
        sp = SlotParams.init(cfg)
        sp.delta = rng.normal(0, 0.01, sp.delta.shape)
        track_params[10 + n] = sp
    batch = T.build_batch(cfg, params, tracks, track_params, obs, rng, cfg.G)
    mask = build_attention_mask(batch.layout)
    preds = forward(batch, params, mask, cfg.beta)
    label_boxes = np.array([tuple(lab.box) for lab in labels])
    track_labels = {cfg.M + n: n for n in range(n_trk)}
    free = list(range(n_trk, len(labels)))
    pseudo = simulate_detector(labels, DetectorParams(fp_rate=0.5), rng)
    fm = T.compute_matchings(cfg, preds, batch.layout, label_boxes, free, track_labels, pseudo)
    return FrameCase(cfg, batch, params, mask, preds.suppression, label_boxes, fm)


def objective(case: FrameCase, grad: bool = False):
    return T.frame_objective(case.cfg, case.batch, case.params, case.mask, case.suppression, case.label_boxes,
                             case.fm, grad=grad)


def parameter_views(case: FrameCase, grads) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(name, parameter array, analytic gradient) for every differentiable input of the frame objective."""
    out = [("delta", case.batch.delta, grads.d_delta), ("logit", case.batch.logit, grads.d_logit)]
    out += [(k, getattr(case.params, k), grads.head[k]) for k in grads.head]
    return out


def fd_errors(case: FrameCase, coords: list[tuple[int, int]] | None = None, h: float = 1e-5):
    """Relative errors between analytic and central-difference gradients.

    ``coords`` lists (view index, flat index) pairs; all coordinates when ``None``.
    """
    _, grads = objective(case, grad=True)
    views = parameter_views(case, grads)
    if coords is None:
        coords = [(v, i) for v, (_, arr, _) in enumerate(views) for i in range(arr.size)]
    errs = []
    for v, i in coords:
        name, arr, g = views[v]
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = objective(case)[0]["loss"]
        flat[i] = old - h
        down = objective(case)[0]["loss"]
        flat[i] = old
        num = (up - down) / (2 * h)
        errs.append((abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-5), name, i, num, float(gflat[i])))
    return errs


# ---------------------------------------------------------------------------
# corpora


def scenario_frames(seed: int, config: ScenarioConfig | None = None):
    return render_all(generate_scenario(config or ScenarioConfig(), seed))


def train_corpus(n: int = 40, base_seed: int = 1000, detector: DetectorParams | None = None):
    """Training sequences with simulated detections drawn from per-sequence streams."""
    detector = detector or DetectorParams()
    seqs = []
    for i in range(n):
        frames = scenario_frames(base_seed + i)
        gen = rngmod.stream(base_seed + i, "detector")
        pseudo = PseudoLabelSet({t + 1: tuple(simulate_detector(f, detector, gen)) for t, f in enumerate(frames)},
                                f"s{i}")
        seqs.append(T.TrainSequence(f"s{i}", frames, pseudo))
    return seqs


# ---------------------------------------------------------------------------
# acceptance reporting

CRITERIA_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    CRITERIA_LINES.append(line)
    print(line)
