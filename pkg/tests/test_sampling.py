import numpy as np
import pytest

from outpaint import diffusion as D
from outpaint import synthdata as SD
from outpaint import trainer as TR
from outpaint.prompt import tokenize_and_embed
from outpaint.sampling import ddim_sample


VOCAB = SD.vocabulary()

CFG = TR.TrainConfig(
    iterations=1, t_steps=10, image_size=12, center_size=8, patch_size=3,
    d_model=16, n_blocks=1, d_text=8, l_center=4, l_surround=4,
)


def setup():
    spec = SD.SynthSpec(image_size=12, center_size=8)
    sample = SD.generate(4, spec)
    params = TR.init_model(CFG, VOCAB)
    pe = tokenize_and_embed(sample.caption, VOCAB, params.text_table, 4, 4)
    return params, sample, pe


def test_ddim_sample_deterministic_given_seed():
    params, sample, pe = setup()
    masked = sample.image * (1 - sample.pixel_mask)
    outs = [
        ddim_sample(params, CFG.schedule(), masked, sample.pixel_mask, pe, 5,
                    np.random.default_rng(3))
        for _ in range(2)
    ]
    np.testing.assert_array_equal(outs[0], outs[1])
    assert outs[0].shape == (3, 12, 12)
    assert np.all(np.isfinite(outs[0]))


def test_ddim_sample_rejects_schedule_mismatch():
    params, sample, pe = setup()
    other = D.linear_schedule(33, 1e-4, 0.02)
    with pytest.raises(ValueError):
        ddim_sample(params, other, sample.image, sample.pixel_mask, pe, 5,
                    np.random.default_rng(0))


def test_ddim_sample_leaves_no_gradients():
    params, sample, pe = setup()
    masked = sample.image * (1 - sample.pixel_mask)
    ddim_sample(params, CFG.schedule(), masked, sample.pixel_mask, pe, 5,
                np.random.default_rng(3))
    assert all(t.grad is None for _, t in params.trainable_parameters())
