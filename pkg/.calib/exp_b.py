import time, numpy as np
from deocc.dataset import DatasetConfig, generate_sample
from deocc.vae import load_vae, scene_object_arrays
from deocc.diffusion import (V2CConfig, init_pretrain, to_control_phase, pretrain_step,
    control_step, latent_stats_from, encode_complete_latent, save_v2c)
from deocc.pipeline import InferConfig, deocclude_scene

t0 = time.time()
N_TRAIN, N_EVAL = 400, 40
dcfg = DatasetConfig(seed=1000, canvas_size=64)
corpus = [generate_sample(dcfg, i) for i in range(N_TRAIN)]
held = [generate_sample(dcfg, 10_000 + i) for i in range(N_EVAL)]
vae = load_vae('.calib/exp_a2_vae').model
print(f'setup {time.time()-t0:.0f}s', flush=True)

latents = [encode_complete_latent(vae, s, sorted(s.visible_masks)) for s in corpus]
stats = latent_stats_from(latents)
cfg = V2CConfig(grid=16, latent_channels=8, width=24, temb_dim=32, seed=0,
                lr_pretrain=2e-3, lr_control=1e-3, batch=4)
state = init_pretrain(cfg, stats)
for i in range(2000):
    rec = pretrain_step(state, latents)
print(f'pretrain done {time.time()-t0:.0f}s loss {np.mean([r["loss"] for r in state.curve[-100:]]):.4f}', flush=True)
state = to_control_phase(state)
for i in range(4000):
    rec = control_step(state, corpus, vae)
    if (i+1) % 1000 == 0:
        print(f'control {i+1} loss {np.mean([r["loss"] for r in state.curve[-200:]]):.4f} {time.time()-t0:.0f}s', flush=True)
save_v2c(state, '.calib/exp_b_v2c')

# end-to-end eval, layer_wise, s=9
for scale in (9.0, 3.0, 1.0):
    inter = union = 0
    comp_ok = comp_tot = 0
    for si, s in enumerate(held):
        cats = {o.object_id: o.category for o in s.objects}
        stack = deocclude_scene(s.canvas, s.visible_masks, cats, s.depth, vae, state.model,
                                stats, seed=si, config=InferConfig(strategy='layer_wise', guidance_scale=scale))
        occluded = {b for _, b in s.occluded_pairs}
        for e in stack.entries:
            t = s.object_by_id(e.object_id).amodal_mask().array
            inter += (e.mask & t).sum(); union += (e.mask | t).sum()
            if e.object_id in occluded:
                vis = s.visible_masks[e.object_id].array
                u1 = (e.mask | t).sum(); u2 = (vis | t).sum()
                iou_pred = (e.mask & t).sum() / u1
                iou_vis = (vis & t).sum() / u2
                comp_ok += iou_pred > iou_vis
                comp_tot += 1
    print(f's={scale}: e2e IoU {inter/union:.3f}; completion {comp_ok}/{comp_tot} = {comp_ok/comp_tot:.3f}; {time.time()-t0:.0f}s', flush=True)
