import numpy as np
import pytest
from conftest import SMALL_AUG, SMALL_UNET
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cinessp import CardiacSegmenter, SelfSupervisedPretrainer
from cinessp.errors import ShapeError, ValidationError

BUDGET = dict(epochs=1, steps_per_epoch=2, batch_size=4, unet=SMALL_UNET, augmentation=SMALL_AUG)


def test_params_and_clone():
    est = CardiacSegmenter(preset="finetune", init="a.pt", policy="encoder_only", seed=3, **BUDGET)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(seed=5).seed == 5 and est.seed == 3


def test_unfitted():
    with pytest.raises(NotFittedError):
        CardiacSegmenter().predict_images(np.zeros((1, 64, 64)))
    with pytest.raises(NotFittedError):
        SelfSupervisedPretrainer().transform(np.zeros((1, 64, 64)))


@pytest.fixture(scope="module")
def pretrainer(phantoms):
    return SelfSupervisedPretrainer(method="mim", **BUDGET).fit(phantoms[:2])


def test_pretrainer_transform(pretrainer, phantoms):
    images = phantoms[0].image[0][:3]
    emb = pretrainer.transform(images)
    assert emb.shape == (3, pretrainer.n_features_out_) and np.isfinite(emb).all()
    assert len(pretrainer.history_) == 1


def test_segmenter_from_pretrainer(pretrainer, phantoms):
    seg = CardiacSegmenter(preset="finetune", init=pretrainer, policy="encoder_decoder_no_output", **BUDGET)
    seg.fit(phantoms[:2], X_val=phantoms[2:3])
    assert seg.transfer_["policy"] == "encoder_decoder_no_output"
    preds = seg.predict(phantoms[3:5])
    v = phantoms[3]
    assert set(preds[0]) == set(v.masks) and preds[0][v.frame_of("ED")].shape == v.masks[v.frame_of("ED")].shape
    assert 0.0 <= seg.score(phantoms[3:5]) <= 1.0
    labels = seg.predict_images(v.image[0][:2])
    assert labels.shape == (2, 64, 64) and labels.max() <= 3


def test_bad_inputs(phantoms):
    with pytest.raises(ValidationError):
        SelfSupervisedPretrainer(method="byol").fit(phantoms[:2])
    with pytest.raises(ValidationError, match="duplicate"):
        CardiacSegmenter(**BUDGET).fit([phantoms[0], phantoms[0]])
    with pytest.raises(ShapeError):
        CardiacSegmenter(**BUDGET).fit(phantoms[:1]).predict_images(np.zeros((2, 3, 4, 5)))
    with pytest.raises(ValidationError):
        CardiacSegmenter(**BUDGET).fit(phantoms[:1]).predict_images(np.full((1, 8, 8), np.nan))
