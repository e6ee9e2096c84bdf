"""CSV ingestion, config parsing, and JSON round-trips."""

import json

import numpy as np
import pytest

from restrat.datafiles import (
    json_dumps,
    population_from_table,
    read_config,
    read_units_csv,
    write_units_csv,
)
from restrat.errors import ParseError, PopulationError

CSV_BASIC = """unit_id,stratum,x_1,x_2
u1,a,0.5,1.0
u2,a,-0.25,2.0
u3,b,1.5,0.0
u4,b,0.125,-1.0
"""

CSV_ANALYSIS = """unit_id,stratum,treated,outcome,x_1
u1,a,1,3.0,0.5
u2,a,0,1.0,-0.25
u3,b,1,5.0,1.5
u4,b,0,2.0,0.125
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestReadUnits:
    def test_basic(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "u.csv", CSV_BASIC))
        assert table.n == 4
        assert table.covariate_names == ["x_1", "x_2"]
        assert table.treated is None
        assert table.covariates[3, 1] == -1.0

    def test_analysis_columns(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "u.csv", CSV_ANALYSIS))
        assert table.treated.tolist() == [1, 0, 1, 0]
        assert table.outcome.tolist() == [3.0, 1.0, 5.0, 2.0]

    def test_explicit_covariates(self, tmp_path):
        text = "unit_id,stratum,score\nu1,a,1.0\nu2,a,2.0\n"
        table = read_units_csv(_write(tmp_path, "u.csv", text), covariates=["score"])
        assert table.covariate_names == ["score"]

    def test_missing_stratum_column(self, tmp_path):
        with pytest.raises(ParseError):
            read_units_csv(_write(tmp_path, "u.csv", "unit_id,x_1\nu1,0.5\n"))

    def test_bad_number(self, tmp_path):
        text = CSV_BASIC.replace("-0.25", "abc")
        with pytest.raises(ParseError):
            read_units_csv(_write(tmp_path, "u.csv", text))

    def test_bad_treated_value(self, tmp_path):
        text = CSV_ANALYSIS.replace("u2,a,0", "u2,a,2")
        with pytest.raises(ParseError):
            read_units_csv(_write(tmp_path, "u.csv", text))

    def test_no_covariates(self, tmp_path):
        with pytest.raises(ParseError):
            read_units_csv(_write(tmp_path, "u.csv", "unit_id,stratum\nu1,a\n"))


class TestRoundTrip:
    def test_write_then_read(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "in.csv", CSV_BASIC))
        out = tmp_path / "out.csv"
        write_units_csv(out, table, treated=np.array([1, 0, 0, 1], dtype=np.int8))
        back = read_units_csv(out)
        assert back.treated.tolist() == [1, 0, 0, 1]
        assert np.array_equal(back.covariates, table.covariates)
        assert back.unit_ids == table.unit_ids


class TestPopulationFromTable:
    def test_scalar_propensity(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "u.csv", CSV_BASIC))
        pop = population_from_table(table, 0.5)
        assert pop.k == 2
        assert pop.stratum_labels == ("a", "b")
        assert pop.treated_counts.tolist() == [1, 1]

    def test_inferred_from_treated(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "u.csv", CSV_ANALYSIS))
        pop = population_from_table(table)
        assert pop.propensities.tolist() == [0.5, 0.5]
        assert pop.observed is not None

    def test_mapping_propensity(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "u.csv", CSV_BASIC))
        pop = population_from_table(table, {"a": 0.5, "b": 0.5})
        assert pop.propensities.tolist() == [0.5, 0.5]

    def test_inconsistent_counts_rejected(self, tmp_path):
        table = read_units_csv(_write(tmp_path, "u.csv", CSV_ANALYSIS))
        with pytest.raises(PopulationError):
            population_from_table(table, {"a": 0.25, "b": 0.5})

    def test_row_order_preserved(self, tmp_path):
        # interleaved strata must keep unit-table order
        text = (
            "unit_id,stratum,x_1\n"
            "u1,b,1.0\nu2,a,2.0\nu3,b,3.0\nu4,a,4.0\n"
        )
        table = read_units_csv(_write(tmp_path, "u.csv", text))
        pop = population_from_table(table, 0.5)
        assert pop.stratum_labels == ("b", "a")
        assert pop.strata[0].tolist() == [0, 2]
        assert pop.strata[1].tolist() == [1, 3]


class TestConfigAndJson:
    def test_config_sections(self, tmp_path):
        path = _write(
            tmp_path,
            "study.ini",
            "[dgp]\ncase = many_small\nk = 25\n\n[study]\nreps = 100\n",
        )
        config = read_config(path)
        assert config["dgp"]["case"] == "many_small"
        assert config["study"]["reps"] == "100"

    def test_bad_config(self, tmp_path):
        with pytest.raises(ParseError):
            read_config(_write(tmp_path, "bad.ini", "reps = 1\n"))

    def test_json_float_roundtrip(self):
        values = [0.1, 1.0 / 3.0, 2.0**-52, 1.2345678901234567e17]
        text = json_dumps({"values": values})
        assert json.loads(text)["values"] == values

    def test_extra_fields_rejected(self, tmp_path):
        text = "unit_id,stratum,x_1\nu1,a,0.5,99\nu2,a,1.0\n"
        with pytest.raises(ParseError):
            read_units_csv(_write(tmp_path, "u.csv", text))
