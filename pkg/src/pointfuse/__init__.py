"""Two-stream point/image 3D detection on a numpy autodiff engine.

Submodules:
    tensor       reverse-mode autodiff on float64 arrays
    gradcheck    central finite-difference verification
    geometry     boxes, projection, rotated IoU
    kitti        KITTI-layout parsing and serialization
    fusion       point-guided image feature fusion
    losses       focal, smooth-L1, bin regression, consistency terms
    evaluation   NMS, AP, consistency ratio
    synth        procedural scenes
    model        two-stream detector
    train        optimizer, training loop, checkpoints
    experiments  paired training experiments
"""

__version__ = "0.1.0"
