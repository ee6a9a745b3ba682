import sys, time, numpy as np
from deocc.dataset import DatasetConfig, generate_sample
from deocc.vae import VaeConfig, train_vae, scene_object_arrays, save_vae

variant = sys.argv[1]
t0 = time.time()
dcfg = DatasetConfig(seed=1000, canvas_size=64)
corpus = [generate_sample(dcfg, i) for i in range(400)]
held = [generate_sample(dcfg, 10_000 + i) for i in range(40)]

cfg = VaeConfig(canvas=64, lr=2e-3, seed=0, full_res_query=variant)
state = train_vae(corpus, cfg, steps=5000, log_every=0)
state.optimizer.lr = 7e-4
state = train_vae(corpus, cfg, steps=2000, state=state, log_every=0)
save_vae(state, f'.calib/exp_d_{variant}_vae')
vae = state.model

sel_ok=sel_tot=inter=union=0
comp_good=comp_tot=zero_added=0
for s in held:
    rgba, queries, ids = scene_object_arrays(s)
    mu, _ = vae.encode_objects(rgba)
    _, prob = vae.decode_objects(mu, queries)
    masks = prob.data[:, 0] >= 0.5
    truths = {i: s.object_by_id(i).amodal_mask().array for i in ids}
    occluded = {b for _, b in s.occluded_pairs}
    for j, oid in enumerate(ids):
        ious = {}
        for other in ids:
            t = truths[other]; u = (masks[j] | t).sum()
            ious[other] = ((masks[j] & t).sum() / u) if u else 1.0
        sel_ok += max(ious, key=ious.get) == oid; sel_tot += 1
        t = truths[oid]; vis = queries[j] > 0.5
        pred = masks[j] | vis
        inter += (pred & t).sum(); union += (pred | t).sum()
        if oid in occluded:
            comp_tot += 1
            if (pred & ~vis).sum() == 0: zero_added += 1
            iou_p = (pred & t).sum() / (pred | t).sum()
            iou_v = (vis & t).sum() / (vis | t).sum()
            comp_good += iou_p > iou_v
print(f'[{variant}] selectivity {sel_ok/sel_tot:.3f} IoU {inter/union:.3f} '
      f'stage1-completion {comp_good}/{comp_tot} = {comp_good/comp_tot:.3f} '
      f'(zero-added {zero_added}) {time.time()-t0:.0f}s', flush=True)
