"""The synthetic sets are learnable but not trivial: small fixed networks clear a bar in a few epochs."""
import numpy as np
import pytest

from hasa.autodiff.tensor import Tensor
from hasa.config import DataConfig
from hasa.data import gen_classification_set, gen_segmentation_set
from hasa.metrics import classification_metrics, confusion_matrix, segmentation_metrics
from hasa.reference import ReferenceConvNet, ReferenceEncoderDecoder
from hasa.train import TrainConfig, predict, train_model

D = DataConfig()


@pytest.mark.slow
def test_reference_convnet_separates_classes():
    train = gen_classification_set(D.n_per_class, D.size, D.seed)
    test = gen_classification_set(D.n_test_per_class, D.size, D.seed + 1_000_003)
    net = ReferenceConvNet(D.size)
    train_model(net, train, TrainConfig(epochs=5, batch_size=16, lr=3e-3, lr_min=3e-4))
    preds = predict(net, test).argmax(axis=1)
    acc = classification_metrics(confusion_matrix(preds, test.labels, 9))["accuracy"]
    print(f"reference convnet accuracy {acc:.3f}")
    assert acc >= 0.80


@pytest.mark.slow
def test_reference_encoder_decoder_finds_follicles():
    train = gen_segmentation_set(D.n_train, D.size, D.seed)
    test = gen_segmentation_set(D.n_test, D.size, D.seed + 1_000_003)
    net = ReferenceEncoderDecoder()
    train_model(net, train, TrainConfig(epochs=10, batch_size=8, lr=3e-3, lr_min=3e-4))
    pred = predict(net, test).argmax(axis=1)
    dsc = segmentation_metrics(pred, test.masks)["follicle"]["dsc"]
    print(f"reference encoder-decoder follicle DSC {dsc:.3f}")
    assert dsc >= 0.80


def test_reference_shapes():
    x = np.zeros((2, 1, 32, 32), dtype=np.float32)
    assert ReferenceConvNet(32)(Tensor(x)).shape == (2, 9)
    assert ReferenceEncoderDecoder()(Tensor(x)).shape == (2, 3, 32, 32)
