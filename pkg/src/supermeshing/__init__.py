"""Super-resolution of 2D stress fields with an attention residual U-Net.

Subpackages and modules:

- ``gridmath``: tensor with reverse-mode autodiff, kernels, Adam, gradient checks
- ``fieldgen``: synthetic Kirsch and Poisson field pairs, dataset files
- ``smnet``: the network and its ablation variants
- ``losses``: content, perceptual and geometric losses
- ``trainer``: splitting, extractor pretraining, training loop
- ``evaluator``: metrics, tables, histograms, time and cost model
- ``cli``: the ``supermesh`` command
"""

__version__ = "0.1.0"
