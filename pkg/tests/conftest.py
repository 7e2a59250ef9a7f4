import numpy as np
import pytest

from causal_ehr_lab.cohort import Cohort, Encounter, PatientRecord, StaticVars, Vocabulary


@pytest.fixture
def tiny_vocab():
    return Vocabulary.build(
        diagnoses=["DX_A", "DX_B", "DX_C", "OUTCOME"],
        medications=["RX_A", "RX_B", "EXP"],
        groups={"grp_ab": ["DX_A", "DX_B"], "grp_rx": ["RX_A"]},
        protected=["EXP", "OUTCOME"],
        n_regions=3,
    )


def make_patient(pid, codes, vocab, sex=0, region=0, smoking=0, t=0, y=0, age0=40, year0=1990):
    encs = tuple(
        Encounter(vocab.id_of(c) if isinstance(c, str) else c, age0 + j, year0 + j, j)
        for j, c in enumerate(codes)
    )
    return PatientRecord(str(pid), StaticVars(sex, region, smoking), encs, t, y)


@pytest.fixture
def tiny_cohort(tiny_vocab):
    pats = [
        make_patient("p0", ["DX_A", "RX_A", "DX_C"], tiny_vocab, sex=1, region=2, t=1, y=1),
        make_patient("p1", ["DX_C"], tiny_vocab, sex=0, region=1, smoking=1, t=0, y=0, age0=60),
    ]
    return Cohort(tiny_vocab, tuple(pats), "fixture")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
