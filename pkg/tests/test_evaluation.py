import numpy as np
import pytest

from mrfcount.config import ModelConfig
from mrfcount.data import dataset_from_arrays, synth_generate, tile_image, triplet_batch
from mrfcount.evaluation import (compute_metrics, evaluate, predict_image,
                                 write_prediction_dump)
from mrfcount.layers import zero_parameters
from mrfcount.network import MRFNet, combine_counts
from mrfcount.tensor import no_grad


def tiny_model(seed=0):
    return MRFNet(ModelConfig(base_width=4, rm_per_phase=(1, 1, 1),
                              patch_side=32), seed=seed)


# -- metrics ------------------------------------------------------------------------


def test_metrics_perfect_predictions():
    m = compute_metrics([10.0, 20.0], [10.0, 20.0])
    assert m.mae == 0.0 and m.rmse == 0.0


def test_metrics_symmetric_errors():
    m = compute_metrics([100.0, 200.0], [110.0, 190.0])
    assert m.mae == pytest.approx(10.0)
    assert m.rmse == pytest.approx(10.0)


def test_metrics_hand_case():
    m = compute_metrics([100.0, 200.0], [120.0, 190.0])
    assert m.mae == pytest.approx(15.0)
    assert m.rmse == pytest.approx(np.sqrt(250.0))
    assert m.images == 2


def test_metrics_rmse_dominates_mae():
    rng = np.random.default_rng(0)
    for _ in range(20):
        gt = rng.uniform(0, 100, 7)
        pred = gt + rng.normal(0, 10, 7)
        m = compute_metrics(gt, pred)
        assert m.rmse >= m.mae >= 0


def test_metrics_permutation_invariant():
    gt = [5.0, 50.0, 500.0]
    pred = [7.0, 40.0, 510.0]
    a = compute_metrics(gt, pred)
    b = compute_metrics(gt[::-1], pred[::-1])
    assert a.mae == b.mae and a.rmse == b.rmse


def test_metrics_empty_rejected():
    with pytest.raises(ValueError):
        compute_metrics([], [])


# -- image prediction ----------------------------------------------------------------


def test_zero_parameter_model_predicts_zero():
    model = tiny_model()
    zero_parameters(model)
    image = np.random.default_rng(1).uniform(0, 1, (70, 90, 3)).astype(np.float32)
    pred = predict_image(model, image)
    assert pred.total == 0.0


def test_single_patch_image_total_equals_patch_estimate():
    model = tiny_model(seed=2)
    image = np.random.default_rng(3).uniform(0, 1, (32, 32, 3)).astype(np.float32)
    pred = predict_image(model, image)
    assert len(pred.patch_counts) == 1
    assert pred.total == pred.patch_counts[0][1]

    patch = tile_image(image, None, 32)[0]
    i1, i2, i3, _ = triplet_batch([patch])
    model.eval()
    with no_grad():
        outputs = model.forward(i1, i2, i3)
    expected = max(float(combine_counts(outputs, model.head_weights())[0]), 0.0)
    assert pred.total == pytest.approx(expected, rel=1e-6)


def test_prediction_total_is_sum_of_patches():
    model = tiny_model(seed=4)
    image = np.random.default_rng(5).uniform(0, 1, (100, 130, 3)).astype(np.float32)
    pred = predict_image(model, image)
    assert pred.total == pytest.approx(sum(c for _, c in pred.patch_counts))
    assert all(c >= 0 for _, c in pred.patch_counts)


def test_prediction_invariant_to_batch_chunking():
    model = tiny_model(seed=6)
    image = np.random.default_rng(7).uniform(0, 1, (96, 96, 3)).astype(np.float32)
    a = predict_image(model, image, batch_size=2)
    b = predict_image(model, image, batch_size=16)
    assert a.total == pytest.approx(b.total, rel=1e-6)


# -- dataset evaluation ---------------------------------------------------------------


def test_evaluate_and_dump(tmp_path):
    model = tiny_model(seed=8)
    images, anns = synth_generate(3, 64, (0, 9), 4.0, seed=9)
    ds = dataset_from_arrays(images, anns)
    metrics, rows = evaluate(model, ds, batch_size=8)
    assert metrics.images == 3
    assert metrics.rmse >= metrics.mae >= 0
    dump = tmp_path / "pred.tsv"
    write_prediction_dump(dump, rows, metrics)
    lines = dump.read_text().strip().splitlines()
    assert len(lines) == 4
    assert lines[-1].startswith("MAE\t")
    first = lines[0].split("\t")
    assert len(first) == 4 and first[0] == anns[0].image_id


def test_evaluate_zero_model_mae_equals_mean_count():
    model = tiny_model(seed=10)
    zero_parameters(model)
    images, anns = synth_generate(6, 64, (2, 10), 4.0, seed=11)
    ds = dataset_from_arrays(images, anns)
    metrics, _ = evaluate(model, ds)
    assert metrics.mae == pytest.approx(np.mean([a.count for a in anns]))


def test_evaluate_empty_rejected():
    model = tiny_model()
    with pytest.raises(ValueError):
        evaluate(model, dataset_from_arrays([], []))
