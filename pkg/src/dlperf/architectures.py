"""Named network topologies.

Full-size nets (``alexnet-2012``, ``vgg-19``, ``googlenet-2014``) follow the
original publications with ungrouped convolutions and are returned symbolic:
layer specs and shapes only, parameters allocated on demand via
``NetworkGraph.initialize``.  The ``mini-*`` nets are small enough to train
on a laptop CPU and come back initialized.
"""

from __future__ import annotations

from .graph import INPUT_ID, GraphError, LayerSpec, NetworkGraph

ARCHITECTURES = ("alexnet-2012", "vgg-19", "googlenet-2014", "mini-alexnet", "mini-googlenet")

_FULL_INPUT = {"alexnet-2012": (3, 227, 227), "vgg-19": (3, 224, 224), "googlenet-2014": (3, 224, 224)}


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []
        self.last = INPUT_ID

    def add(self, lid: str, kind: str, inputs=None, **params) -> str:
        self.layers.append(LayerSpec(lid, kind, list(inputs or [self.last]), params))
        self.last = lid
        return lid

    def conv_relu(self, lid: str, out_channels: int, kernel: int, stride: int = 1, pad: int = 0, inputs=None) -> str:
        self.add(lid, "conv", inputs, out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)
        return self.add(f"{lid}_relu", "relu")

    def inception(self, name: str, c1: int, c3r: int, c3: int, c5r: int, c5: int, pool_proj: int) -> str:
        src = self.last
        b1 = self.conv_relu(f"{name}_1x1", c1, 1, inputs=[src])
        self.conv_relu(f"{name}_3x3_reduce", c3r, 1, inputs=[src])
        b3 = self.conv_relu(f"{name}_3x3", c3, 3, pad=1)
        self.conv_relu(f"{name}_5x5_reduce", c5r, 1, inputs=[src])
        b5 = self.conv_relu(f"{name}_5x5", c5, 5, pad=2)
        self.add(f"{name}_pool", "maxpool", [src], window=3, stride=1, pad=1)
        bp = self.conv_relu(f"{name}_pool_proj", pool_proj, 1)
        return self.add(f"{name}_output", "concat", [b1, b3, b5, bp])


def _alexnet(class_count: int) -> list[LayerSpec]:
    b = _Builder()
    b.conv_relu("conv1", 96, 11, stride=4)
    b.add("norm1", "lrn", k=2.0, n=5, alpha=1e-4, beta=0.75)
    b.add("pool1", "maxpool", window=3, stride=2)
    b.conv_relu("conv2", 256, 5, pad=2)
    b.add("norm2", "lrn", k=2.0, n=5, alpha=1e-4, beta=0.75)
    b.add("pool2", "maxpool", window=3, stride=2)
    b.conv_relu("conv3", 384, 3, pad=1)
    b.conv_relu("conv4", 384, 3, pad=1)
    b.conv_relu("conv5", 256, 3, pad=1)
    b.add("pool5", "maxpool", window=3, stride=2)
    b.add("flatten", "flatten")
    b.add("fc6", "fc", out_features=4096)
    b.add("fc6_relu", "relu")
    b.add("drop6", "dropout", rate=0.5)
    b.add("fc7", "fc", out_features=4096)
    b.add("fc7_relu", "relu")
    b.add("drop7", "dropout", rate=0.5)
    b.add("fc8", "fc", out_features=class_count)
    b.add("prob", "softmax")
    return b.layers


def _vgg19(class_count: int) -> list[LayerSpec]:
    b = _Builder()
    stages = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)]
    for s, (width, reps) in enumerate(stages, start=1):
        for r in range(1, reps + 1):
            b.conv_relu(f"conv{s}_{r}", width, 3, pad=1)
        b.add(f"pool{s}", "maxpool", window=2, stride=2)
    b.add("flatten", "flatten")
    for i in (6, 7):
        b.add(f"fc{i}", "fc", out_features=4096)
        b.add(f"fc{i}_relu", "relu")
        b.add(f"drop{i}", "dropout", rate=0.5)
    b.add("fc8", "fc", out_features=class_count)
    b.add("prob", "softmax")
    return b.layers


def _googlenet_aux(b: _Builder, name: str, src: str, class_count: int) -> None:
    b.add(f"{name}_pool", "avgpool", [src], window=5, stride=3, aux=True)
    b.add(f"{name}_conv", "conv", out_channels=128, kernel=1, aux=True)
    b.add(f"{name}_relu", "relu", aux=True)
    b.add(f"{name}_flatten", "flatten", aux=True)
    b.add(f"{name}_fc", "fc", out_features=1024, aux=True)
    b.add(f"{name}_fc_relu", "relu", aux=True)
    b.add(f"{name}_drop", "dropout", rate=0.7, aux=True)
    b.add(f"{name}_classifier", "fc", out_features=class_count, aux=True)


def _googlenet(class_count: int, aux_classifiers: bool) -> list[LayerSpec]:
    b = _Builder()
    lrn = dict(k=1.0, n=5, alpha=1e-4, beta=0.75)
    b.conv_relu("conv1", 64, 7, stride=2, pad=3)
    b.add("pool1", "maxpool", window=3, stride=2, pad=1)
    b.add("norm1", "lrn", **lrn)
    b.conv_relu("conv2_reduce", 64, 1)
    b.conv_relu("conv2", 192, 3, pad=1)
    b.add("norm2", "lrn", **lrn)
    b.add("pool2", "maxpool", window=3, stride=2, pad=1)
    b.inception("inception_3a", 64, 96, 128, 16, 32, 32)
    b.inception("inception_3b", 128, 128, 192, 32, 96, 64)
    b.add("pool3", "maxpool", window=3, stride=2, pad=1)
    a4 = b.inception("inception_4a", 192, 96, 208, 16, 48, 64)
    b.inception("inception_4b", 160, 112, 224, 24, 64, 64)
    b.inception("inception_4c", 128, 128, 256, 24, 64, 64)
    d4 = b.inception("inception_4d", 112, 144, 288, 32, 64, 64)
    e4 = b.inception("inception_4e", 256, 160, 320, 32, 128, 128)
    b.add("pool4", "maxpool", [e4], window=3, stride=2, pad=1)
    b.inception("inception_5a", 256, 160, 320, 32, 128, 128)
    b.inception("inception_5b", 384, 192, 384, 48, 128, 128)
    b.add("pool5", "avgpool", **{"global": True})
    b.add("drop5", "dropout", rate=0.4)
    b.add("flatten", "flatten")
    b.add("classifier", "fc", out_features=class_count)
    main_tail = b.add("prob", "softmax")
    if aux_classifiers:
        _googlenet_aux(b, "aux1", a4, class_count)
        _googlenet_aux(b, "aux2", d4, class_count)
        b.last = main_tail
    return b.layers


def _mini_alexnet(class_count: int) -> list[LayerSpec]:
    b = _Builder()
    b.conv_relu("conv1", 16, 5, pad=2)
    b.add("norm1", "lrn", k=2.0, n=5, alpha=1e-4, beta=0.75)
    b.add("pool1", "maxpool", window=2, stride=2)
    b.conv_relu("conv2", 32, 3, pad=1)
    b.add("pool2", "maxpool", window=2, stride=2)
    b.conv_relu("conv3", 32, 3, pad=1)
    b.add("pool3", "maxpool", window=2, stride=2)
    b.add("flatten", "flatten")
    b.add("fc4", "fc", out_features=64)
    b.add("fc4_relu", "relu")
    b.add("fc5", "fc", out_features=class_count)
    b.add("prob", "softmax")
    return b.layers


def _mini_googlenet(class_count: int) -> list[LayerSpec]:
    b = _Builder()
    b.conv_relu("conv1", 16, 3, pad=1)
    b.add("pool1", "maxpool", window=2, stride=2)
    b.conv_relu("conv2", 32, 3, pad=1)
    b.add("pool2", "maxpool", window=2, stride=2)
    b.inception("inception_a", 16, 16, 24, 8, 8, 8)
    b.inception("inception_b", 24, 24, 32, 8, 16, 16)
    b.add("pool3", "avgpool", **{"global": True})
    b.add("flatten", "flatten")
    b.add("classifier", "fc", out_features=class_count)
    b.add("prob", "softmax")
    return b.layers


def build_architecture(
    name: str,
    class_count: int,
    input_shape=None,
    seed: int | None = 0,
    aux_classifiers: bool = False,
) -> NetworkGraph:
    """Build one of :data:`ARCHITECTURES`.

    Mini nets are initialized with ``seed`` (pass ``seed=None`` to keep them
    symbolic); full-size nets are always returned symbolic.
    """
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if name in _FULL_INPUT:
        expected = _FULL_INPUT[name]
        if input_shape is not None and tuple(input_shape) != expected:
            raise ValueError(f"{name} requires input shape {expected}, got {tuple(input_shape)}")
        if name == "alexnet-2012":
            layers = _alexnet(class_count)
        elif name == "vgg-19":
            layers = _vgg19(class_count)
        else:
            layers = _googlenet(class_count, aux_classifiers)
        return NetworkGraph(layers, expected, class_count, name)

    input_shape = tuple(input_shape) if input_shape is not None else (3, 32, 32)
    if len(input_shape) != 3 or not all(32 <= d <= 64 for d in input_shape[1:]) or input_shape[0] < 1:
        raise ValueError(f"{name} accepts C×H×W inputs with 32 <= H, W <= 64, got {input_shape}")
    layers = _mini_alexnet(class_count) if name == "mini-alexnet" else _mini_googlenet(class_count)
    try:
        net = NetworkGraph(layers, input_shape, class_count, name)
    except GraphError as exc:
        raise ValueError(f"{name}: {exc}") from None
    if seed is not None:
        net.initialize(seed)
    return net
