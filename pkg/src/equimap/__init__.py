"""Equivariant, invariant and equivalent maps between image representations.

Submodules
----------
imaging     affine geometry, warping, synthetic datasets, image I/O
fields      feature fields, receptive-field geometry, binary field format
hog         HOG extractor and its exact flip / 180-degree permutations
featnet     small convolutional network with backpropagation and SGD
equilearn   learning sparse equivariant maps (LS / RR / FS solvers)
netsurgery  transformation and stitching layers inside networks
analysis    invariance scores, compensated classification, reports
structreg   pose estimation with precomputed transformed templates
cli         the ``equimap`` command line
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "GeometricTransform": "imaging",
    "parse_transform": "imaging",
    "warp": "imaging",
    "LabeledDataset": "imaging",
    "synth_classification_set": "imaging",
    "synth_generic_images": "imaging",
    "synth_pose_set": "imaging",
    "Geometry": "fields",
    "FeatureField": "fields",
    "read_field": "fields",
    "write_field": "fields",
    "HogConfig": "hog",
    "HOGTransformer": "hog",
    "extract_hog": "hog",
    "analytic_permutation": "hog",
    "Network": "featnet",
    "NetworkSplit": "featnet",
    "TrainConfig": "featnet",
    "ConvNetClassifier": "featnet",
    "build_t3": "featnet",
    "train": "featnet",
    "grad_check": "featnet",
    "EquivariantMap": "equilearn",
    "EquivariantMapRegressor": "equilearn",
    "RegressionConfig": "equilearn",
    "learn_map": "equilearn",
    "evaluate_map": "equilearn",
    "neighborhood": "equilearn",
    "forward_select": "equilearn",
    "TransformationLayer": "netsurgery",
    "StitchingLayer": "netsurgery",
    "build_permutation_table": "netsurgery",
    "map_to_translayer": "netsurgery",
    "train_transformation_layer": "netsurgery",
    "learn_stitch": "netsurgery",
    "evaluate_franken": "netsurgery",
    "invariance_scores": "analysis",
    "max_invariant_set": "analysis",
    "LinearHingeClassifier": "analysis",
    "compensated_classification": "analysis",
    "build_pose_set": "structreg",
    "train_pose_model": "structreg",
    "predict_pose": "structreg",
    "PoseRegressor": "structreg",
    "bench": "structreg",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    # imported lazily so that the command line can set thread limits first
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + __all__)
