import time, numpy as np
from deocc.dataset import DatasetConfig, generate_sample
from deocc.vae import VaeConfig, train_vae, save_vae, scene_object_arrays
from deocc.diffusion import (V2CConfig, init_pretrain, to_control_phase, pretrain_step,
    control_step, latent_stats_from, encode_complete_latent, save_v2c, build_condition,
    sample_full_view)
from deocc.dataset import augment_visible_subset
from deocc.pipeline import InferConfig, deocclude_scene

t0 = time.time()
N_TRAIN, N_EVAL = 600, 40
dcfg = DatasetConfig(seed=1000, canvas_size=64)
corpus = [generate_sample(dcfg, i) for i in range(N_TRAIN)]
held = [generate_sample(dcfg, 10_000 + i) for i in range(N_EVAL)]
print(f'setup {time.time()-t0:.0f}s', flush=True)

cfg = VaeConfig(canvas=64, lr=2e-3, seed=0)
state = train_vae(corpus, cfg, steps=5000, log_every=0)
state.optimizer.lr = 7e-4
state = train_vae(corpus, cfg, steps=2500, state=state, log_every=0)
state.optimizer.lr = 3e-4
state = train_vae(corpus, cfg, steps=1500, state=state, log_every=0)
save_vae(state, '.calib/exp_c_vae')
print(f'vae trained {time.time()-t0:.0f}s final {np.mean([r["total"] for r in state.curve[-100:]]):.0f}', flush=True)
vae = state.model

# stage-1 quality readout
sel_ok=sel_tot=inter=union=0
for s in held:
    rgba, queries, ids = scene_object_arrays(s)
    mu, _ = vae.encode_objects(rgba)
    rgb, prob = vae.decode_objects(mu, queries)
    masks = prob.data[:, 0] >= 0.5
    truths = {i: s.object_by_id(i).amodal_mask().array for i in ids}
    for j, oid in enumerate(ids):
        ious = {}
        for other in ids:
            t = truths[other]; u = (masks[j] | t).sum()
            ious[other] = ((masks[j] & t).sum() / u) if u else 1.0
        sel_ok += max(ious, key=ious.get) == oid; sel_tot += 1
        m2 = masks[j] | (queries[j] > 0.5)
        inter += (m2 & truths[oid]).sum(); union += (m2 | truths[oid]).sum()
print(f'stage1: selectivity {sel_ok/sel_tot:.3f} recon IoU {inter/union:.3f} {time.time()-t0:.0f}s', flush=True)

latents = [encode_complete_latent(vae, s, sorted(s.visible_masks)) for s in corpus]
stats = latent_stats_from(latents)
vcfg = V2CConfig(grid=16, latent_channels=8, width=24, temb_dim=32, seed=0,
                 lr_pretrain=2e-3, lr_control=1e-3, batch=4)
st2 = init_pretrain(vcfg, stats)
for i in range(2500):
    pretrain_step(st2, latents)
print(f'pretrain done {time.time()-t0:.0f}s loss {np.mean([r["loss"] for r in st2.curve[-100:]]):.4f}', flush=True)
st2 = to_control_phase(st2)
for i in range(6000):
    control_step(st2, corpus, vae)
    if (i+1) % 2000 == 0:
        st2.optimizer.lr *= 0.6
        print(f'control {i+1} loss {np.mean([r["loss"] for r in st2.curve[-200:]]):.4f} {time.time()-t0:.0f}s', flush=True)
save_v2c(st2, '.calib/exp_c_v2c')

# guidance-scale sanity: latents must differ across scales
s0 = held[0]
sub, m_o, edges = augment_visible_subset(s0, np.random.default_rng(0))
cond = build_condition(vae, s0, sub, m_o, edges, stats, vcfg)
f9 = sample_full_view(st2.model, stats, cond, 9.0, np.random.default_rng(5))
f1 = sample_full_view(st2.model, stats, cond, 1.0, np.random.default_rng(5))
f0 = sample_full_view(st2.model, stats, cond, 0.0, np.random.default_rng(5))
print(f'latent diff s9-s1 {np.abs(f9-f1).max():.4f}, s9-s0 {np.abs(f9-f0).max():.4f}', flush=True)

for scale in (9.0, 3.0):
    inter = union = comp_ok = comp_tot = 0
    for si, s in enumerate(held):
        cats = {o.object_id: o.category for o in s.objects}
        stack = deocclude_scene(s.canvas, s.visible_masks, cats, s.depth, vae, st2.model,
                                stats, seed=si, config=InferConfig(strategy='layer_wise', guidance_scale=scale))
        occluded = {b for _, b in s.occluded_pairs}
        for e in stack.entries:
            t = s.object_by_id(e.object_id).amodal_mask().array
            inter += (e.mask & t).sum(); union += (e.mask | t).sum()
            if e.object_id in occluded:
                vis = s.visible_masks[e.object_id].array
                iou_pred = (e.mask & t).sum() / (e.mask | t).sum()
                iou_vis = (vis & t).sum() / (vis | t).sum()
                comp_ok += iou_pred > iou_vis; comp_tot += 1
    print(f's={scale}: e2e IoU {inter/union:.3f}; completion {comp_ok}/{comp_tot} = {comp_ok/comp_tot:.3f}; {time.time()-t0:.0f}s', flush=True)
