import time, numpy as np
from deocc.dataset import DatasetConfig, generate_sample
from deocc.vae import VaeConfig, train_vae, scene_object_arrays, save_vae
from deocc.nn import Tensor

t0 = time.time()
N_TRAIN, N_EVAL, STEPS = 300, 40, 2500
dcfg = DatasetConfig(seed=1000, canvas_size=64)
corpus = [generate_sample(dcfg, i) for i in range(N_TRAIN)]
held = [generate_sample(dcfg, N_TRAIN + i) for i in range(N_EVAL)]
print(f'corpus built {time.time()-t0:.0f}s', flush=True)

cfg = VaeConfig(canvas=64, lr=2e-3, seed=0)
state = train_vae(corpus, cfg, steps=STEPS, log_every=0)
print(f'trained {STEPS} steps {time.time()-t0:.0f}s; loss曲线: '
      f'{state.curve[0]["total"]:.0f} -> {np.mean([r["total"] for r in state.curve[-50:]]):.0f}', flush=True)
comps = {k: float(np.mean([r[k] for r in state.curve[-50:]])) for k in ('l_r','l_p','l_kl','l_m')}
print('final components:', {k: round(v,1) for k,v in comps.items()}, flush=True)

# selectivity + reconstruction IoU on held-out, from true latent mu
model = state.model
sel_ok = 0; sel_tot = 0; inter=0; union=0
for s in held:
    rgba, queries, ids = scene_object_arrays(s)
    mu, _ = model.encode_objects(rgba)
    rgb, prob = model.decode_objects(mu, queries)
    masks = prob.data[:, 0] >= 0.5
    truths = {i: s.object_by_id(i).amodal_mask().array for i in ids}
    for j, oid in enumerate(ids):
        ious = {}
        for other in ids:
            t = truths[other]
            u = (masks[j] | t).sum()
            ious[other] = ((masks[j] & t).sum() / u) if u else 1.0
        if max(ious, key=ious.get) == oid:
            sel_ok += 1
        sel_tot += 1
        inter += (masks[j] & truths[oid]).sum(); union += (masks[j] | truths[oid]).sum()
print(f'selectivity {sel_ok}/{sel_tot} = {sel_ok/sel_tot:.3f}; recon amodal IoU (micro, from true mu): {inter/union:.3f}', flush=True)
save_vae(state, '.calib/exp_a_vae')
print(f'total {time.time()-t0:.0f}s', flush=True)
