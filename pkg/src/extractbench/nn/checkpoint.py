"""Model checkpoints: header (backbone, dims, seed) + float64 weights."""

import numpy as np

from .. import binio
from .model import GnnModel, param_shapes


def save_model(model, path):
    meta = {
        "kind": "gnn-checkpoint",
        "backbone": model.backbone,
        "feat_dim": model.feat_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "dropout": model.dropout,
        "seed": model.seed,
    }
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in model.params.items()}
    binio.write(path, meta, arrays)


def load_model(path):
    meta, arrays = binio.read(path)
    if meta.get("kind") != "gnn-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    names = [n for n, _ in param_shapes(meta["backbone"], meta["feat_dim"], meta["hidden_dim"], meta["num_classes"])]
    if list(arrays) != names:
        raise ValueError(f"{path}: weight order {list(arrays)} != {names}")
    model = GnnModel(meta["backbone"], meta["feat_dim"], meta["hidden_dim"], meta["num_classes"],
                     {k: arrays[k].astype(np.float64) for k in names}, meta["dropout"], meta["seed"])
    model.check()
    return model
