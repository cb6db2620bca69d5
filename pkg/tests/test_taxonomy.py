import numpy as np
import pytest

from unilabel.errors import ConfigurationError, ShapeError
from unilabel.taxonomy import (
    DatasetTaxonomy,
    LabelDef,
    MappingMatrix,
    UnifiedTaxonomy,
    mapping_from_assignment,
    validate_mapping,
)


def tax(names, dim=4, dataset_id=0):
    return DatasetTaxonomy(dataset_id, [LabelDef(n, np.full(dim, i, float)) for i, n in enumerate(names)])


def test_identity_mapping_is_valid():
    assert validate_mapping(MappingMatrix(0, np.eye(3))).ok


def test_double_linked_row_is_reported():
    bits = np.eye(3)
    bits[1] = [1, 1, 0]
    rep = validate_mapping(MappingMatrix(0, bits))
    assert rep.bad_rows == (1,) and not rep


def test_empty_column_is_reported():
    bits = np.eye(3)
    bits[2, 2] = 0
    rep = validate_mapping(MappingMatrix(0, bits))
    assert rep.empty_cols == (2,) and rep.bad_rows == ()


def test_every_violation_listed():
    bits = np.array([[1, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0]])
    rep = validate_mapping(MappingMatrix(0, bits))
    assert rep.bad_rows == (0, 1) and rep.empty_cols == (3,)


def test_shape_mismatch_with_taxonomy():
    with pytest.raises(ShapeError):
        validate_mapping(MappingMatrix(0, np.eye(3)), tax(["a", "b"]))
    with pytest.raises(ShapeError):
        validate_mapping(MappingMatrix(0, np.eye(3)), node_count=4)


def test_assignment_examples():
    m = mapping_from_assignment([0, 1, None], 2)
    assert np.array_equal(m.bits, [[1, 0], [0, 1], [0, 0]])
    m = mapping_from_assignment([0] * 4, 3)
    assert list(m.bits.sum(axis=0)) == [4, 0, 0]
    assert validate_mapping(mapping_from_assignment([2, 0, 1], 3)).ok
    with pytest.raises(IndexError):
        mapping_from_assignment([3], 3)


def test_assignment_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assign = [None if rng.random() < 0.2 else int(rng.integers(0, 4)) for _ in range(7)]
        m = mapping_from_assignment(assign, 4)
        assert m.assignment() == assign
        assert (m.bits.sum(axis=1) <= 1).all()


def test_mapping_is_immutable():
    m = MappingMatrix(0, np.eye(2))
    with pytest.raises(ValueError):
        m.bits[0, 0] = False


def test_taxonomy_invariants():
    assert tax(["a", "b"]).label_names == ["a", "b"]
    with pytest.raises(ConfigurationError, match="duplicate"):
        tax(["a", "a"])
    with pytest.raises(ConfigurationError):
        DatasetTaxonomy(0, [])
    with pytest.raises(ShapeError):
        DatasetTaxonomy(0, [LabelDef("a", np.zeros(3)), LabelDef("b", np.zeros(4))])


def test_unified_node_count_must_cover():
    ts = [tax(["a", "b", "c"]), tax(["x", "y"], dataset_id=1)]
    UnifiedTaxonomy(3).check_covers(ts)
    with pytest.raises(ConfigurationError):
        UnifiedTaxonomy(2).check_covers(ts)
