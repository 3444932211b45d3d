import os
import warnings

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
warnings.filterwarnings("ignore")

import numpy as np
import pytest

import keras
from keras import layers


def _head(x, classes=3):
    return layers.Dense(classes, activation="softmax", name="head")(x)


def _randomize_bn(model, name, seed):
    rng = np.random.default_rng(seed)
    bn = model.get_layer(name)
    ch = bn.get_weights()[0].shape[0]
    bn.set_weights([
        rng.uniform(0.5, 1.5, ch).astype(np.float32),
        rng.normal(0, 0.3, ch).astype(np.float32),
        rng.normal(0, 0.3, ch).astype(np.float32),
        rng.uniform(0.5, 2.0, ch).astype(np.float32),
    ])
    return model


def micro_models() -> dict:
    """One compact classifier per supported layer kind."""
    keras.utils.set_random_seed(7)
    models = {}

    inp = keras.Input(shape=(8, 8, 3))
    x = layers.Conv2D(5, 3, strides=2, padding="same", activation="relu", name="c")(inp)
    x = layers.GlobalAveragePooling2D(name="gap")(x)
    models["conv_relu"] = keras.Model(inp, _head(x))

    inp = keras.Input(shape=(8, 8, 3))
    x = layers.Conv2D(4, 3, padding="valid", name="c")(inp)
    x = layers.ReLU(name="act")(x)
    x = layers.GlobalAveragePooling2D(name="gap")(x)
    models["conv_valid"] = keras.Model(inp, _head(x))

    inp = keras.Input(shape=(8, 8, 3))
    x = layers.DepthwiseConv2D(3, padding="same", name="dw")(inp)
    x = layers.ReLU(6.0, name="act")(x)
    x = layers.GlobalAveragePooling2D(name="gap")(x)
    models["depthwise"] = keras.Model(inp, _head(x))

    inp = keras.Input(shape=(8, 8, 3))
    x = layers.Conv2D(6, 3, padding="same", use_bias=False, name="c")(inp)
    x = layers.BatchNormalization(name="bn")(x)
    x = layers.ReLU(6.0, name="act")(x)
    x = layers.GlobalAveragePooling2D(name="gap")(x)
    models["batchnorm"] = _randomize_bn(keras.Model(inp, _head(x)), "bn", 11)

    inp = keras.Input(shape=(8, 8, 3))
    a = layers.Conv2D(4, 3, padding="same", activation="relu", name="c1")(inp)
    b = layers.Conv2D(4, 3, padding="same", name="c2")(a)
    x = layers.Add(name="add")([a, b])
    x = layers.GlobalAveragePooling2D(name="gap")(x)
    models["residual_add"] = keras.Model(inp, _head(x))

    inp = keras.Input(shape=(8, 8, 3))
    x = layers.ZeroPadding2D(((0, 1), (0, 1)), name="pad")(inp)
    x = layers.Conv2D(4, 3, strides=2, padding="valid", name="c")(x)
    x = layers.GlobalAveragePooling2D(name="gap")(x)
    models["zeropad_conv"] = keras.Model(inp, _head(x))

    inp = keras.Input(shape=(6, 6, 2))
    x = layers.GlobalAveragePooling2D(name="gap")(inp)
    x = layers.Dense(8, activation="relu", name="fc")(x)
    x = layers.Dropout(0.4, name="drop")(x)
    models["dense_dropout"] = keras.Model(inp, _head(x))

    inp = keras.Input(shape=(6, 6, 2))
    x = layers.GlobalAveragePooling2D(name="gap")(inp)
    x = layers.Dense(4, name="fc")(x)
    x = layers.Activation("softmax", name="probs")(x)
    models["softmax_activation"] = keras.Model(inp, x)

    models["sequential"] = keras.Sequential([
        keras.Input(shape=(8, 8, 1)),
        layers.Conv2D(3, 3, padding="same", activation="relu", name="sc"),
        layers.GlobalAveragePooling2D(name="sgap"),
        layers.Dense(2, activation="softmax", name="shead"),
    ])

    return models


@pytest.fixture(scope="session")
def micro_checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    paths = {}
    for name, model in micro_models().items():
        path = root / f"{name}.h5"
        model.save(path)
        paths[name] = path
    return paths


@pytest.fixture(scope="session")
def mobilenet_checkpoint(tmp_path_factory):
    keras.utils.set_random_seed(21)
    model = keras.applications.MobileNetV2(input_shape=(96, 96, 3),
                                           weights=None, classes=4)
    path = tmp_path_factory.mktemp("mbv2") / "mobilenetv2.h5"
    model.save(path)
    return path, int(model.count_params())
