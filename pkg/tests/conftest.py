import os

# single-threaded BLAS keeps reductions bit-deterministic
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from fogseg.config import build_run_config
from fogseg.data.synth import synth_fog_corpus, write_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small seeded clean/hazy corpus on disk (16 x 32 images, 8 scenes)."""
    root = tmp_path_factory.mktemp("corpus")
    paths = write_corpus(synth_fog_corpus(8, size=(16, 32), seed=3), root, val_fraction=0.25)
    return root, paths


def tiny_values(manifests=None, **overrides):
    values = dict(
        height=16, width=32, stage_channels=(8, 16, 24), rgb_plain_blocks=1, dilations=(2,),
        decoder_blocks=1, dense_growth=4, dense_layers=1, epochs=2, batch_size=4,
        gen_filters=4, disc_filters=4, gen_res_blocks=1, disc_layers=2, transfer_steps=3,
        transfer_batch_size=2, transfer_height=16, transfer_width=16, finetune_epochs=1,
        workers=1, seed=0,
    )
    if manifests is not None:
        values.update(
            seg_train=manifests["clean_train"], seg_val=manifests["clean_val"],
            da_foggy=manifests["hazy_train"], da_clear=manifests["clean_train"],
            ft_foggy=manifests["hazy_train"], ft_clear=manifests["clean_train"],
        )
    values.update(overrides)
    return values


@pytest.fixture
def tiny_config(tmp_path, corpus_dir):
    """Factory for a desk-scale RunConfig wired to the session corpus."""
    _, paths = corpus_dir

    def make(**overrides):
        return build_run_config(tiny_values(paths, **{"out_dir": tmp_path / "runs", **overrides}))
    return make
