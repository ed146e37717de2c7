import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from ssl_alpnet.data import DatasetSplit, Volume
from ssl_alpnet.errors import ShapeMismatchError, ValidationError
from ssl_alpnet.evaluation import (
    aggregate_reports,
    assign_chunks,
    dice,
    evaluate_class,
    predict_chunks,
    run_evaluation,
    split_extent,
    write_report,
)
from ssl_alpnet.model import DESK_ENCODER, ALPNet, AlpConfig, Encoder


def _slab(vid, top, bottom, n=40, size=8):
    lab = np.zeros((n, size, size), dtype=bool)
    lab[top:bottom + 1, 2:5, 2:5] = True
    return Volume(vid, np.zeros((n, size, size)), {"organ": lab})


def test_dice_cases():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    assert dice(a, a) == 100.0
    b = np.zeros((4, 4), bool)
    b[1, :4] = True
    assert dice(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[0, :2] = True
    c[1, :2] = True
    assert dice(a, c) == 50.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 100.0
    assert dice(a, np.zeros((4, 4), bool)) == 0.0
    with pytest.raises(ShapeMismatchError):
        dice(a, np.zeros((4, 5), bool))


def test_dice_symmetric(rng):
    for _ in range(20):
        a, b = rng.random((2, 5, 6, 6)) > 0.5
        assert dice(a, b) == dice(b, a)


def test_chunks_on_extent_10_39():
    asg = assign_chunks(_slab("s", 10, 39), _slab("q", 10, 39), "organ", 3)
    assert asg.support_slices == [14, 24, 34]
    assert asg.query_ranges == [(10, 19), (20, 29), (30, 39)]


def test_chunk_remainder_and_single_chunk():
    lens = [b - a + 1 for a, b in split_extent(5, 14, 3)]
    assert lens == [4, 3, 3]
    asg = assign_chunks(_slab("s", 4, 20), _slab("q", 7, 12), "organ", 1)
    assert asg.support_slices == [12]
    assert asg.query_ranges == [(7, 12)]


def test_chunk_tiling_random_extents(rng):
    for _ in range(100):
        top = int(rng.integers(0, 50))
        length = int(rng.integers(1, 60))
        c = int(rng.integers(1, length + 1))
        chunks = split_extent(top, top + length - 1, c)
        covered = [s for a, b in chunks for s in range(a, b + 1)]
        assert covered == list(range(top, top + length))
        sizes = [b - a + 1 for a, b in chunks]
        assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
        for a, b in chunks:
            assert a <= (a + b) // 2 <= b


def test_chunk_errors():
    with pytest.raises(ValidationError):
        assign_chunks(_slab("s", 0, 1), _slab("q", 0, 10), "organ", 3)
    with pytest.raises(ValidationError):
        assign_chunks(_slab("s", 0, 10), _slab("s", 0, 10), "organ", 3)
    empty = Volume("e", np.zeros((5, 8, 8)), {"organ": np.zeros((5, 8, 8), bool)})
    with pytest.raises(ValidationError):
        assign_chunks(_slab("s", 0, 10), empty, "organ", 3)


class OracleEncoder(nn.Module):
    """Stride-1 'encoder' that looks up the ground truth of each input plane."""

    def __init__(self, volumes, cls):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(1))
        self.stride = 1
        self.lookup = {}
        for v in volumes:
            for s in range(v.n_slices):
                self.lookup[v.intensities[s].tobytes()] = v.labels[cls][s]

    def forward(self, x):
        out = []
        for img in x:
            m = torch.from_numpy(self.lookup[img[0].float().numpy().tobytes()]).to(x.dtype)
            out.append(torch.stack([m, 1 - m]))
        return torch.stack(out) + 0 * self.dummy


def test_oracle_encoder_scores_high(phantoms):
    for cls in ("liver", "kidney"):
        model = ALPNet(OracleEncoder(phantoms, cls), AlpConfig())
        scores = [evaluate_class(model, phantoms[0], q, cls, 3) for q in phantoms[1:]]
        assert min(scores) > 95, (cls, scores)
        assert evaluate_class(model, phantoms[0], phantoms[0], cls, 3, allow_same_volume=True) > 95


class Blank(nn.Module):
    def __init__(self):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(1))
        self.stride = 1

    def forward(self, x):
        return torch.zeros(x.shape[0], 2, *x.shape[-2:]) + 0 * self.dummy


def test_all_background_prediction_scores_zero(phantoms, monkeypatch):
    import ssl_alpnet.evaluation as ev

    model = ALPNet(Blank())
    monkeypatch.setattr(ev, "predict_chunks", lambda *a, **k: np.zeros(phantoms[1].intensities.shape, bool))
    assert ev.evaluate_class(model, phantoms[0], phantoms[1], "liver") == 0.0


def test_query_labels_do_not_reach_the_model(phantoms, rng):
    torch.manual_seed(0)
    model = ALPNet(Encoder.from_spec(DESK_ENCODER)).eval()
    sup, qry = phantoms[0], phantoms[1]
    asg = assign_chunks(sup, qry, "spleen", 3)
    pred = predict_chunks(model, sup, qry, asg)
    top, bottom = qry.class_extent("spleen")
    lab = qry.labels["spleen"].copy()
    noise = rng.random(lab.shape) < 0.3
    noise[:top] = False
    noise[bottom + 1:] = False
    lab ^= noise
    lab[top:bottom + 1, 0, 0] = True  # extent unchanged
    labels = dict(qry.labels, spleen=lab, liver=~qry.labels["liver"])
    probe = Volume(qry.id, qry.intensities, labels, dict(qry.class_ids), qry.modality, qry.spacing, True)
    asg2 = assign_chunks(sup, probe, "spleen", 3)
    assert asg2 == asg
    assert np.array_equal(predict_chunks(model, sup, probe, asg2), pred)


def _split(ids):
    return DatasetSplit(0, [], list(ids), [], ["liver"], 1, [])


def test_pairing_and_report(phantoms, tmp_path):
    torch.manual_seed(0)
    model = ALPNet(Encoder.from_spec(DESK_ENCODER)).eval()
    ids = [phantoms[0].id, phantoms[1].id]
    rep = run_evaluation(model, phantoms, _split(ids), ["liver", "kidney"], 3, seed=4, config={"k": 1})
    assert len([p for p in rep["pairs"] if p["class"] == "liver"]) == 2
    assert {(p["support"], p["query"]) for p in rep["pairs"] if p["class"] == "kidney"} == {
        (ids[0], ids[1]), (ids[1], ids[0])}
    for p in rep["pairs"]:
        assert 0 <= p["dice"] <= 100
    assert rep["seed"] == 4 and rep["config"] == {"k": 1}
    assert rep["conventions"]["query_extent_from_ground_truth"] is True
    liver = rep["classes"]["liver"]
    assert liver["mean_dice"] == pytest.approx(np.mean(list(liver["per_query"].values())))

    again = run_evaluation(model, phantoms, _split(ids), ["liver", "kidney"], 3, seed=4, config={"k": 1})
    a, b = write_report(rep, tmp_path / "a.json"), write_report(again, tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["fold"] == 0


def test_aggregate_folds():
    reps = [{"fold": f, "classes": {"liver": {"mean_dice": d}}} for f, d in enumerate([60.0, 80.0])]
    agg = aggregate_reports(reps)
    assert agg["classes"]["liver"] == 70.0 and agg["folds"]["1"]["liver"] == 80.0


def test_overlays_one_png_per_query_slice(phantoms, tmp_path):
    model = ALPNet(OracleEncoder(phantoms, "spleen"), AlpConfig())
    split = _split([phantoms[0].id, phantoms[1].id])
    run_evaluation(model, phantoms, split, ["spleen"], 3, overlay_dir=tmp_path)
    pngs = sorted(tmp_path.rglob("*.png"))
    want = sum(b - a + 1 for v in phantoms[:2] for a, b in [v.class_extent("spleen")])
    assert len(pngs) == want
