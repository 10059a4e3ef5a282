"""Command line interface.

Exit codes: 0 on success, 1 for validation errors, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from . import config as config_mod
from . import orchestration as orch
from .config import ConfigError
from .datasets import (
    VARIANTS,
    BackgroundCorpus,
    DatasetBundle,
    DigitCorpus,
    ImageSizeError,
    SceneSpec,
    SourceError,
    build,
)
from .evaluation import (
    ConvEmbedder,
    TorchScriptEmbedder,
    TraversalSpec,
    compute_fid,
    dump_components,
    random_direction,
    save_grid,
    train_crop_embedder,
    traverse_latent,
)
from .models import sample_latents
from .segmentation import (
    Segmenter,
    SegmenterTrainConfig,
    bundle_pairs,
    evaluate_segmenter,
    generated_bundle,
    generator_pairs,
    train_segmenter,
)
from .training import CheckpointError, load_generator

log = logging.getLogger("compgan")


def _embedder(kind: str, bundle: DatasetBundle, seed: int):
    if kind == "builtin":
        return train_crop_embedder(bundle, seed=seed)
    if kind == "untrained":
        return ConvEmbedder.untrained(seed)
    if kind.endswith(".pt") and Path(kind).exists():
        try:
            state = torch.load(kind, map_location="cpu", weights_only=True)
            model = ConvEmbedder(dim=int(state["dim"]), n_classes=int(state["n_classes"]))
            model.load_state_dict(state["weights"])
            return model.eval()
        except (KeyError, RuntimeError):
            pass
    return TorchScriptEmbedder(kind)


# -- verbs ---------------------------------------------------------------------------

def cmd_data_build(a):
    spec = SceneSpec(a.variant, seed=a.seed)
    digits = DigitCorpus.from_path(a.digits) if a.digits else DigitCorpus.bundled()
    backgrounds = None
    if a.variant == "cifar10_mm":
        backgrounds = BackgroundCorpus.from_path(a.backgrounds) if a.backgrounds else BackgroundCorpus.synthetic()
    bundle = build(spec, a.count, digits, backgrounds)
    bundle.save(a.out)
    print(f"wrote {len(bundle)} scenes to {a.out} "
          f"(train {len(bundle.splits['train'])}, holdout {len(bundle.splits['holdout'])}, "
          f"test {len(bundle.splits['test'])})")


def cmd_data_ingest(a):
    bundle = orch.ingest(a.src, a.out)
    print(f"ingested {len(bundle)} CLEVR images into {a.out}")


def cmd_train(a):
    cfg = config_mod.load(a.config)
    raw = cfg.to_dict()
    if a.data:
        raw["data"]["dir"] = a.data
    if a.out:
        raw["output_root"] = a.out
    cfg = config_mod.from_dict(raw)
    out = orch.run_experiment(cfg, resume=not a.fresh)
    print(f"run directory: {out}")


def cmd_eval_fid(a):
    gen = load_generator(a.ckpt)
    bundle = DatasetBundle.load(a.data)
    embedder = _embedder(a.embedder, bundle, a.seed)
    fid = compute_fid(gen, bundle, embedder, a.n, seed=a.seed)
    print(f"FID {fid:.4f} ({gen.cfg.tag}, n={a.n}, embedder={a.embedder})")


def cmd_traverse(a):
    gen = load_generator(a.ckpt)
    g = torch.Generator().manual_seed(a.seed)
    base = sample_latents(gen.cfg, a.rows, generator=g)
    spec = TraversalSpec(a.component, random_direction(gen.cfg.latent_dim, a.seed + 1),
                         tuple(float(t) for t in torch.linspace(-a.scale, a.scale, a.steps)))
    images = traverse_latent(gen, base, spec)
    rows = [[img[r] for img in images] for r in range(a.rows)]
    print(f"wrote {save_grid(rows, a.out)}")


def cmd_dump(a):
    gen = load_generator(a.ckpt)
    g = torch.Generator().manual_seed(a.seed)
    with torch.no_grad():
        out = gen(sample_latents(gen.cfg, a.n, generator=g))
    paths = dump_components(out, a.out)
    print(f"wrote {len(paths)} files to {a.out}")


def cmd_segment_extract(a):
    gen = load_generator(a.ckpt)
    variant = a.variant or ("independent_mm" if gen.cfg.compose_mode == "sum_clip" else "rgb_occluded_mm")
    bundle = generated_bundle(gen, a.n, SceneSpec(variant, seed=a.seed), seed=a.seed)
    bundle.save(a.out)
    print(f"wrote {len(bundle)} generated pairs to {a.out}")


def cmd_segment_train(a):
    cfg = SegmenterTrainConfig(steps=a.steps, batch_size=a.batch_size, lr=a.lr, seed=a.seed)
    if a.ckpt:
        gen = load_generator(a.ckpt)
        source, k = generator_pairs(gen), gen.cfg.k
    else:
        bundle = DatasetBundle.load(a.data)
        source, k = bundle_pairs(bundle, seed=a.seed), a.k
    model, losses = train_segmenter(source, k, cfg, log_every=a.log_every)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"n_classes": model.n_classes, "widths": list(model.widths), "weights": model.state_dict(),
                "losses": losses}, a.out)
    print(f"saved segmenter to {a.out} (final loss {losses[-1] if losses else float('nan'):.4f})")


def cmd_segment_eval(a):
    state = torch.load(a.segmenter, map_location="cpu", weights_only=True)
    model = Segmenter(int(state["n_classes"]), tuple(state["widths"]))
    model.load_state_dict(state["weights"])
    bundle = DatasetBundle.load(a.data)
    report = evaluate_segmenter(model, bundle, split=a.split, ignore_overlap=not a.keep_overlap, limit=a.limit)
    Path(a.report).write_text(report.to_text())
    print(f"ARI {report.mean:.4f} +- {report.std:.4f} over {len(report.scores)} images")


def cmd_grid(a):
    if a.preset:
        base = config_mod.load(a.config) if a.config else None
        spec = orch.PRESET_GRIDS[a.preset](base, seeds=a.seeds)
    else:
        if not a.config:
            raise ConfigError(["grid needs --preset or --config"])
        spec = orch.GridSpec(base=config_mod.load(a.config), seeds=a.seeds)
    cells = orch.enumerate_grid(spec)
    print(f"{len(cells)} configurations x {len(spec.seeds)} seeds = {len(cells) * len(spec.seeds)} runs")
    if a.list or a.write:
        for i, c in enumerate(cells):
            print(f"{i:3d}  {c.tag:<14s} {c.name}")
            if a.write:
                out = Path(a.write)
                out.mkdir(parents=True, exist_ok=True)
                c.save(out / f"cell{i:03d}.yaml")
        return
    jobs = [orch.with_seed(c, s) for c in cells for s in spec.seeds]
    if a.parallel <= 1:
        for job in jobs:
            orch.run_experiment(job)
        return
    tmp = Path(jobs[0].resolved_output_root) / "_grid_configs"
    tmp.mkdir(parents=True, exist_ok=True)
    paths = [job.save(tmp / f"job{i:04d}.yaml") for i, job in enumerate(jobs)]
    # each cell runs in its own process; threads only wait on them
    with ThreadPoolExecutor(a.parallel) as pool:
        codes = list(pool.map(lambda p: subprocess.call([sys.executable, "-m", "compgan", "train",
                                                         "--config", str(p)]), paths))
    failed = [str(p) for p, c in zip(paths, codes) if c != 0]
    if failed:
        raise RuntimeError(f"{len(failed)} grid cells failed: {failed}")


def cmd_report(a):
    groups = orch.summarize_runs(orch.find_runs(a.root))
    if not groups:
        print("no runs with FID rows found")
        return
    for name, summary in sorted(groups.items(), key=lambda kv: kv[1].mean):
        print(f"{summary.tag:<14s} FID {summary.mean:9.3f} +- {summary.std:7.3f}  "
              f"({len(summary.best)} seeds)  {name}")


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    data = sub.add_parser("data", help="build or ingest datasets").add_subparsers(dest="action", required=True)
    b = data.add_parser("build")
    b.add_argument("--variant", choices=[v for v in VARIANTS if v != "clevr"], required=True)
    b.add_argument("--count", type=int, required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--digits", help="MNIST .npz or IDX directory (default: bundled 8x8 digits)")
    b.add_argument("--backgrounds", help="CIFAR10 .npz or batch directory (default: synthetic)")
    b.set_defaults(func=cmd_data_build)
    c = data.add_parser("ingest-clevr")
    c.add_argument("--src", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_data_ingest)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset directory (overrides data.dir)")
    t.add_argument("--out", help="output root (overrides output_root)")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="FID of a checkpoint").add_subparsers(dest="action", required=True)
    f = ev.add_parser("fid")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--embedder", default="builtin")
    f.add_argument("--n", type=int, default=10_000)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_eval_fid)

    tr = sub.add_parser("traverse", help="latent traversal grid for one component")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--component", type=int, required=True)
    tr.add_argument("--steps", type=int, default=8)
    tr.add_argument("--scale", type=float, default=1.0)
    tr.add_argument("--rows", type=int, default=4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", default="traversal.png")
    tr.set_defaults(func=cmd_traverse)

    dump = sub.add_parser("dump", help="per-component image dumps").add_subparsers(dest="action", required=True)
    d = dump.add_parser("components")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="components")
    d.set_defaults(func=cmd_dump)

    seg = sub.add_parser("segment", help="segmentation from generated labels").add_subparsers(dest="action", required=True)
    se = seg.add_parser("extract")
    se.add_argument("--ckpt", required=True)
    se.add_argument("--n", type=int, required=True)
    se.add_argument("--out", required=True)
    se.add_argument("--variant", choices=VARIANTS)
    se.add_argument("--seed", type=int, default=0)
    se.set_defaults(func=cmd_segment_extract)
    st = seg.add_parser("train")
    src = st.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--data")
    st.add_argument("--k", type=int, default=3, help="object labels in --data")
    st.add_argument("--steps", type=int, default=20_000)
    st.add_argument("--batch-size", type=int, default=32)
    st.add_argument("--lr", type=float, default=1e-3)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--log-every", type=int, default=500)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_segment_train)
    sv = seg.add_parser("eval")
    sv.add_argument("--segmenter", required=True)
    sv.add_argument("--data", required=True)
    sv.add_argument("--split", default="test")
    sv.add_argument("--limit", type=int)
    sv.add_argument("--keep-overlap", action="store_true")
    sv.add_argument("--report", required=True)
    sv.set_defaults(func=cmd_segment_eval)

    g = sub.add_parser("grid", help="enumerate or run a hyperparameter grid")
    g.add_argument("--preset", choices=sorted(orch.PRESET_GRIDS))
    g.add_argument("--config", help="base experiment config")
    g.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    g.add_argument("--list", action="store_true", help="print the cells without running")
    g.add_argument("--write", help="write one config file per cell into this directory")
    g.add_argument("--parallel", type=int, default=1)
    g.set_defaults(func=cmd_grid)

    r = sub.add_parser("report", help="best FID per configuration across seeds")
    r.add_argument("--root", default="runs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ImageSizeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SourceError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
