"""
Module that stores custom types used around the package

Composite records live next to the code that builds them; pydantic
configuration models are in configure.py
"""

from typing import Literal, TypeAlias

import numpy as np
import numpy.typing as npt

from pydantic import JsonValue

# arbitrary json we know nothing about
JSON: TypeAlias = JsonValue

# json when we know it is an object at least
JSONObject: TypeAlias = dict[str, JSON]

# dense real matrix, one data point per column (M1 x M2, or r_d x M2 once reduced)
DataMatrix: TypeAlias = npt.NDArray[np.float64]

# real vector: singular values, innovation values, scores...
Vector: TypeAlias = npt.NDArray[np.float64]

# per-column integer tags: cluster ids, groups, permutations
IntVector: TypeAlias = npt.NDArray[np.int64]

# per-column yes/no: outlier verdicts, label masks
BoolVector: TypeAlias = npt.NDArray[np.bool_]

# the methods that evalkit knows how to run end to end
Method: TypeAlias = Literal["isearch", "cop", "pca"]

# which success flag a sweep cell counts
Criterion: TypeAlias = Literal["recovery", "detection", "separation"]

# what an experiment config asks the cli to do
Mode: TypeAlias = Literal["gen", "run", "cop", "pca", "cluster", "correct", "sweep"]

# per-column tag in Dataset.labels
INLIER = 0
OUTLIER = 1
