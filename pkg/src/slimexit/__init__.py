"""Width-slimmed multi-exit transformer encoders, trained and served on numpy.

Submodules:
    autodiff      reverse-mode engine over dense float64 arrays
    linalg        one-sided Jacobi SVD and low-rank factor splitting
    model         multi-exit encoder, parameter and FLOP accounting
    checkpoint    manifest + raw blob serialization
    taskgen       synthetic sequence classification tasks
    distill       two-stage distillation with per-depth gradient averaging
    slender       importance scoring, structured pruning, embedding factoring
    exit_runtime  entropy-gated dynamic inference
    pipeline      end-to-end compression runs and ablations
"""

__version__ = "0.1.0"
