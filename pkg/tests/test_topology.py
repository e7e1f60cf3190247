"""Tests for the topology search space and architecture documents."""

import itertools
import json

import numpy as np
import pytest

from vitgauge.topology import (
    DEFAULT_CHOICES,
    DIMENSIONS,
    SEED_SCALE,
    SEED_TOPOLOGY,
    ScaleSpec,
    SearchSpace,
    TopologyError,
    TopologySpec,
    decode,
    decode_with_meta,
    encode,
    sample_uniform,
    space_size,
    spec_hash,
    validate,
    validate_scale,
)


def _document(**changes) -> dict:
    """Seed architecture document as a dict, with top-level blocks replaced."""
    document = json.loads(encode(SEED_TOPOLOGY, SEED_SCALE, seed=7))
    document.update(changes)
    return document


class TestSearchSpace:
    def test_full_space_cardinality(self):
        assert space_size(SearchSpace()) == 4_556_250

    def test_reduced_space_matches_enumeration(self):
        choices = {"K1": (4, 5, 6), "S1": (2, 4), "heads": (16, 32, 64)}
        space = SearchSpace(choices)
        enumerated = list(itertools.product(*(choices[name] for name in space.dimensions)))
        assert space_size(space) == len(enumerated) == 18

    def test_dimensions_follow_policy_order(self):
        space = SearchSpace({"heads": (16,), "K1": (4,), "E3": (2,)})
        assert space.dimensions == ("K1", "E3", "heads")

    def test_default_choices_cover_every_dimension(self):
        assert set(DEFAULT_CHOICES) == set(DIMENSIONS)


class TestTopologySpec:
    def test_stage_heads_halve_towards_stage_one(self):
        assert SEED_TOPOLOGY.stage_heads == (4, 8, 16, 32)

    def test_last_stage_split_is_one(self):
        assert SEED_TOPOLOGY.stage_splits == (2, 1, 1, 1)

    def test_choices_mapping_is_complete(self):
        values = SEED_TOPOLOGY.to_choices()
        assert list(values) == list(DIMENSIONS)
        assert TopologySpec.from_choices(values) == SEED_TOPOLOGY

    def test_missing_choice_raises(self):
        values = SEED_TOPOLOGY.to_choices()
        del values["E4"]
        with pytest.raises(TopologyError, match="E4"):
            TopologySpec.from_choices(values)


class TestValidate:
    def test_seed_topology_is_valid(self):
        assert validate(SEED_TOPOLOGY) == []

    def test_out_of_range_field_is_named(self):
        values = SEED_TOPOLOGY.to_choices()
        values["K1"] = 9
        assert validate(TopologySpec.from_choices(values)) == ["K1"]

    def test_narrowed_space_rejects_excluded_value(self):
        space = SearchSpace({"heads": (16,)})
        assert validate(SEED_TOPOLOGY, space) == ["heads"]

    def test_width_must_split_into_stage_one_heads(self):
        problems = validate_scale(ScaleSpec(depths=(1, 1, 1, 1), width=30), SEED_TOPOLOGY)
        assert any("divisible" in p for p in problems)

    def test_depths_must_be_positive(self):
        problems = validate_scale(ScaleSpec(depths=(1, 0, 1, 1), width=32), SEED_TOPOLOGY)
        assert problems == ["L2 must be >= 1"]


class TestSampleUniform:
    def test_same_seed_same_topology(self):
        assert sample_uniform(SearchSpace(), 3) == sample_uniform(SearchSpace(), 3)

    def test_samples_are_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert validate(sample_uniform(SearchSpace(), rng)) == []

    def test_absent_dimensions_keep_seed_values(self):
        spec = sample_uniform(SearchSpace({"K1": (4, 5)}), 0)
        values = spec.to_choices()
        assert values["K1"] in (4, 5)
        assert values["E4"] == SEED_TOPOLOGY.expansions[3]


class TestSpecHash:
    def test_is_short_hex(self):
        key = spec_hash(SEED_TOPOLOGY)
        assert len(key) == 12
        int(key, 16)

    def test_scale_changes_hash(self):
        assert spec_hash(SEED_TOPOLOGY, SEED_SCALE) != spec_hash(SEED_TOPOLOGY)
        assert spec_hash(SEED_TOPOLOGY, SEED_SCALE) != spec_hash(SEED_TOPOLOGY, ScaleSpec((1, 1, 2, 1), 32))


class TestDocuments:
    def test_encode_then_decode(self):
        assert decode(encode(SEED_TOPOLOGY, SEED_SCALE)) == (SEED_TOPOLOGY, SEED_SCALE)

    def test_meta_is_returned(self):
        _, _, meta = decode_with_meta(json.dumps(_document()))
        assert meta == {"seed": 7, "schema_version": 1}

    def test_config_snapshot_is_tolerated(self):
        text = json.dumps(_document(config={"seed": 0}))
        assert decode(text) == (SEED_TOPOLOGY, SEED_SCALE)

    def test_missing_field_raises(self):
        document = _document()
        del document["topology"]["K1"]
        with pytest.raises(TopologyError, match="missing fields: K1"):
            decode(json.dumps(document))

    def test_unknown_field_raises(self):
        document = _document()
        document["topology"]["K5"] = 3
        with pytest.raises(TopologyError, match="unknown fields: K5"):
            decode(json.dumps(document))

    def test_schema_version_is_checked(self):
        document = _document(meta={"seed": 0, "schema_version": 2})
        with pytest.raises(TopologyError, match="schema_version"):
            decode(json.dumps(document))

    def test_out_of_range_value_raises(self):
        document = _document()
        document["topology"]["S1"] = 3
        with pytest.raises(TopologyError, match="S1"):
            decode(json.dumps(document))

    def test_non_integer_value_raises(self):
        document = _document()
        document["scale"]["C"] = 32.0
        with pytest.raises(TopologyError, match="integer"):
            decode(json.dumps(document))

    def test_malformed_json_raises(self):
        with pytest.raises(TopologyError, match="Malformed"):
            decode("{not json")
