"""Command-line entry point: synth / train-vae / train-v2c / infer / eval / serve.

Every artifact-producing command embeds the resolved config hash, so a run
is reproducible from (config, seed).  Runtime failures exit 1 with a
machine-readable error category on stderr; usage errors exit 2.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from .bundle import load_bundle, save_stage1, save_stage2
from .config import load_run_config, resolve_out
from .diffusion import (encode_complete_latent, init_pretrain, latent_stats_from,
                        control_step, pretrain_step, to_control_phase)
from .errors import DeoccError
from .metrics import evaluate
from .pipeline import InferConfig, deocclude_scene, write_layer_stack
from .vae import load_vae, train_vae

log = logging.getLogger(__name__)


def _fail(exc: DeoccError) -> None:
    sys.stderr.write(json.dumps({"error_category": exc.category, "message": str(exc)}) + "\n")
    sys.exit(1)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@click.group()
@click.option("--verbose/--quiet", default=True, help="structured progress logs")
def main(verbose):
    _setup_logging(verbose)


@main.command()
@click.option("--num", type=int, default=None, help="number of samples")
@click.option("--size", type=int, default=None, help="canvas side in pixels")
@click.option("--kmin", type=int, default=None)
@click.option("--kmax", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
def synth(num, size, kmin, kmax, seed, out, config_path):
    """Generate an object-ensemble corpus of scene samples."""
    try:
        cfg = load_run_config(config_path, {
            "canvas": size, "dataset.num_samples": num, "dataset.k_min": kmin,
            "dataset.k_max": kmax, "dataset.seed": seed})
        out_dir = resolve_out(out)
        ds.write_corpus(cfg.dataset, out_dir, config_hash=cfg.config_hash())
        click.echo(json.dumps({"out": str(out_dir), "num": cfg.dataset.num_samples,
                               "config_hash": cfg.config_hash(),
                               "content_hash": ds.corpus_content_hash(out_dir)}))
    except DeoccError as e:
        _fail(e)


@main.command("train-vae")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="models directory")
@click.option("--steps", type=int, default=4000)
@click.option("--seed", type=int, default=None)
@click.option("--resume/--fresh", default=False)
@click.option("--config", "config_path", type=click.Path(), default=None)
def train_vae_cmd(corpus_dir, out, steps, seed, resume, config_path):
    """Stage 1: train the parallel VAE on a synthesized corpus."""
    try:
        corpus = ds.read_corpus(corpus_dir)
        canvas = corpus[0].canvas.height
        cfg = load_run_config(config_path, {"canvas": canvas, "vae.seed": seed})
        out_dir = resolve_out(out)
        state = None
        if resume:
            state = load_vae(Path(out_dir) / "stage1")
            log.info("resuming stage-1 training at step %d", state.step)
        state = train_vae(corpus, cfg.vae, steps=steps, state=state)
        save_stage1(state, out_dir, cfg)
        click.echo(json.dumps({"out": str(out_dir), "step": state.step,
                               "final_loss": state.curve[-1]["total"],
                               "config_hash": cfg.config_hash()}))
    except DeoccError as e:
        _fail(e)


@main.command("train-v2c")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True),
              help="directory holding the trained stage-1 checkpoint; stage-2 lands here")
@click.option("--pretrain-steps", type=int, default=2000)
@click.option("--steps", type=int, default=4000)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def train_v2c_cmd(corpus_dir, models_dir, pretrain_steps, steps, seed, config_path):
    """Stage 2: pretrain the unconditional denoiser, then train the
    visible-to-complete control branch (stage-1 encoder frozen)."""
    try:
        corpus = ds.read_corpus(corpus_dir)
        canvas = corpus[0].canvas.height
        cfg = load_run_config(config_path, {"canvas": canvas, "v2c.seed": seed})
        vae_state = load_vae(Path(models_dir) / "stage1")
        vae = vae_state.model
        log.info("encoding %d corpus latents with the frozen stage-1 encoder", len(corpus))
        latents = [encode_complete_latent(vae, s, sorted(s.visible_masks)) for s in corpus]
        stats = latent_stats_from(latents)
        state = init_pretrain(cfg.v2c, stats)
        for i in range(pretrain_steps):
            rec = pretrain_step(state, latents)
            if (i + 1) % 500 == 0:
                log.info("pretrain step %d loss %.4f", rec["step"], rec["loss"])
        state = to_control_phase(state)
        for i in range(steps):
            rec = control_step(state, corpus, vae)
            if (i + 1) % 500 == 0:
                log.info("control step %d loss %.4f", rec["step"], rec["loss"])
        save_stage2(state, models_dir, cfg)
        click.echo(json.dumps({"out": str(models_dir), "step": state.step,
                               "final_loss": state.curve[-1]["loss"],
                               "backbone_hash": state.model.backbone_hash()[:16],
                               "config_hash": cfg.config_hash()}))
    except DeoccError as e:
        _fail(e)


@main.command()
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True),
              help="a sample directory produced by synth")
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(["one_by_one", "layer_wise", "once_for_all"]),
              default="layer_wise")
@click.option("--seed", type=int, default=0)
@click.option("--guidance-scale", type=float, default=None)
@click.option("--out", required=True, type=click.Path())
def infer(scene_dir, models_dir, strategy, seed, guidance_scale, out):
    """Deocclude one scene into a per-object layer stack directory."""
    try:
        sample = ds.read_sample(scene_dir)
        bundle = load_bundle(models_dir)
        cfg = InferConfig(strategy=strategy, guidance_scale=guidance_scale)
        cats = {o.object_id: o.category for o in sample.objects}
        stack = deocclude_scene(sample.canvas, sample.visible_masks, cats, sample.depth,
                                bundle.vae, bundle.v2c, bundle.stats, seed=seed, config=cfg)
        stack.provenance["config_hash"] = bundle.config_hash
        out_dir = resolve_out(out)
        write_layer_stack(stack, out_dir)
        click.echo(json.dumps({"out": str(out_dir), "passes_used": stack.provenance["passes_used"],
                               "strategy": strategy, "seed": seed,
                               "guidance_scale": stack.provenance["guidance_scale"]}))
    except DeoccError as e:
        _fail(e)


@main.command("eval")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True))
@click.option("--strategies", default="all",
              help='comma list or "all" (one_by_one,layer_wise,once_for_all)')
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
def eval_cmd(corpus_dir, models_dir, strategies, seed, out):
    """Evaluate trained models on a corpus; writes a JSON report and prints a table."""
    try:
        corpus = ds.read_corpus(corpus_dir)
        bundle = load_bundle(models_dir)
        strats = ("one_by_one", "layer_wise", "once_for_all") if strategies == "all" \
            else tuple(s.strip() for s in strategies.split(","))
        report = evaluate(corpus, bundle.vae, bundle.v2c, bundle.stats,
                          strategies=strats, seed=seed,
                          config_hash=bundle.config_hash, corpus_id=str(corpus_dir))
        out_path = resolve_out(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(report.to_json())
        click.echo(report.to_table())
        click.echo(json.dumps({"out": str(out_path)}))
    except DeoccError as e:
        _fail(e)


@main.command()
@click.option("--models", "models_dir", type=click.Path(), default=None,
              help="trained models; sessions that need deocclusion fail 503 without them")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8008)
def serve(models_dir, host, port):
    """Run the recomposition HTTP service."""
    import uvicorn

    from .service import create_app
    app = create_app(models_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
