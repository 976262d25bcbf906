"""Reference models the acceptance suite compares against."""

from dlperf.graph import LayerSpec, NetworkGraph


def linear_baseline(input_shape, classes, seed=0) -> NetworkGraph:
    """Softmax regression on raw pixels: one fully connected layer."""
    layers = [
        LayerSpec("flatten", "flatten", ["input"]),
        LayerSpec("fc", "fc", ["flatten"], {"out_features": classes}),
    ]
    return NetworkGraph(layers, tuple(input_shape), classes, "linear").initialize(seed)
