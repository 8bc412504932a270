"""Semi-supervised hyperspectral pixel classification with edge-aware superpixel
label propagation, history-fused pseudo-labels and tripartite sample gating."""

__version__ = "0.1.0"
