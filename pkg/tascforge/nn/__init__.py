"""
A small numpy CNN: layer kernels, the network graph, losses, training and accounting.

Submodules are imported directly (`tascforge.nn.network`, ...) to keep this package free of
import cycles with `tascforge.dataio`.
"""
