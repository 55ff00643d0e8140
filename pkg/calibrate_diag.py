"""Diagnostic: which surrounding attribute follows the prompt (not shipped)."""
import sys
import time

import numpy as np

from outpaint import evaluation as EV
from outpaint import synthdata as SD
from outpaint import trainer as TR
from outpaint.prompt import tokenize_and_embed
from outpaint.sampling import ddim_sample

table_std = float(sys.argv[1]) if len(sys.argv) > 1 else 0.02

t0 = time.time()
cfg = TR.TrainConfig(iterations=3000, seed=0)
vocab = SD.vocabulary()
samples, _ = SD.build_dataset(2000, seed=11, uncond_fraction=cfg.uncond_fraction)

params = TR.init_model(cfg, vocab)
if table_std != 0.02:
    rng = np.random.default_rng(987)
    params.text_table.data = rng.normal(0.0, table_std, params.text_table.data.shape)
params, opt, losses = TR.run_training(cfg, samples, vocab, params=params)
first, last = float(np.mean(losses[:500])), float(np.mean(losses[-500:]))
print(f"std={table_std} train {time.time()-t0:.0f}s ratio={last/first:.3f} last={last:.4f}", flush=True)

eval_samples, _ = SD.build_dataset(200, seed=999)
prompts = EV.swap_surrounding_colors([s.caption for s in eval_samples], seed=5)
schedule = cfg.schedule()

tex_hits = col_hits = both = 0
for i in range(200):
    s = eval_samples[i]
    cond = prompts[i]
    pe = tokenize_and_embed(cond, vocab, params.text_table, cfg.l_center, cfg.l_surround)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=77, spawn_key=(i,)))
    gen = ddim_sample(params, schedule, s.image * (1 - s.pixel_mask), s.pixel_mask, pe, 50, rng)
    _, det_s = EV.detect_keywords(gen, s.pixel_mask)
    t_ok = det_s[0] in cond.surrounding
    c_ok = det_s[1] in cond.surrounding
    tex_hits += t_ok
    col_hits += c_ok
    both += t_ok and c_ok
print("fusion:", [f"{v:.3f}" for v in params.fusion_values()])
print(f"texture_acc={tex_hits/200:.3f} color_acc={col_hits/200:.3f} both={both/200:.3f} total {time.time()-t0:.0f}s")
