"""Planted-signal fixtures built from the stub backends."""

from vtsent.featurestore import materialize_bundles
from vtsent.synthetic import make_dataset, stub_registry
from vtsent.training import FeatureTable


def planted(n=200, planted_branch="face", seed=0, signal=6.0, presence=None, class_weights=None, dims=None):
    ds = make_dataset(n, seed=seed, class_weights=class_weights)
    reg = stub_registry(planted_branch, dims=dims, presence=presence, signal=signal)
    bundles = materialize_bundles(None, ds, reg).bundles
    table = FeatureTable.from_bundles([bundles[s] for s in ds.ids], ds.labels)
    return ds, table, bundles
