"""One-off calibration of the desk-scale training criteria (not shipped)."""
import time

import numpy as np

from outpaint import evaluation as EV
from outpaint import synthdata as SD
from outpaint import trainer as TR

t0 = time.time()
cfg = TR.TrainConfig(iterations=3000, seed=0, learning_rate=2e-3)
vocab = SD.vocabulary()
samples, _ = SD.build_dataset(2000, seed=11, uncond_fraction=cfg.uncond_fraction)
print(f"data built {time.time()-t0:.1f}s", flush=True)

params, opt, losses = TR.run_training(cfg, samples, vocab)
first = float(np.mean(losses[:500]))
last = float(np.mean(losses[-500:]))
print(f"train done {time.time()-t0:.1f}s first500={first:.4f} last500={last:.4f} ratio={last/first:.3f}", flush=True)

eval_samples, _ = SD.build_dataset(200, seed=999)  # fresh, all conditional
prompts = EV.swap_surrounding_colors([s.caption for s in eval_samples], seed=5)
schedule = cfg.schedule()

t1 = time.time()
rep_trained = EV.evaluate(params, schedule, eval_samples, 200, vocab,
                          prompt_mode="custom", custom_prompts=prompts,
                          infer_steps=cfg.infer_steps, seed=77)
print(f"eval trained {time.time()-t1:.1f}s: {rep_trained.to_json()}", flush=True)

untrained = TR.init_model(cfg, vocab)
rep_null = EV.evaluate(untrained, schedule, eval_samples, 200, vocab,
                       prompt_mode="custom", custom_prompts=prompts,
                       infer_steps=cfg.infer_steps, seed=77)
print(f"eval untrained: {rep_null.to_json()}", flush=True)

chance = EV.surrounding_chance_rate()
sigma = float(np.sqrt(chance * (1 - chance) / 200))
print(f"chance={chance:.4f} sigma={sigma:.4f} need >= null+3sigma = {rep_null.region_accuracy_surrounding + 3*sigma:.4f}")
print(f"trained acc = {rep_trained.region_accuracy_surrounding:.4f}")
print(f"loss ratio {last/first:.3f} (need <= 0.7); total {time.time()-t0:.1f}s")
