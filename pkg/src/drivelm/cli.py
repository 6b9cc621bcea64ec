"""Command-line entry point: ``drivelm <command> [options]``.

Every command writes ``stamp.json`` (config hash, seeds, versions) next to its
outputs. Failures print a one-line JSON error record to stderr and exit
nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

log = logging.getLogger("drivelm")

FORMATS = {"checkpoint": "DGCK/1", "codebook": "DGCB/1", "record": "DGSQ/1", "codec": "drivelm-codec/1",
           "dataset": "drivelm-dataset/1", "scenario": "drivelm-scenario/1", "config": "drivelm-config/1"}
ABLATIONS = ("copy-x", "copy-y", "copy-theta", "copy-all", "const-vel", "no-action-posemb")


class CommandError(RuntimeError):
    pass


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    # only effective before numpy is first imported, which the CLI defers until here
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def write_stamp(out: Path, command: str, cfg, args, inputs: list[Path] = ()) -> None:
    import numpy as np
    from . import __version__
    stamp = {
        "command": command,
        "config_digest": cfg.digest(),
        "seeds": {"run": cfg.seed, "model": cfg.model.seed, "train": cfg.train.seed},
        "versions": {"drivelm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "formats": FORMATS,
        "threads": args.threads,
        "inputs": {str(p): _sha(p) for p in inputs if p.is_file()},
    }
    (out / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True))
    cfg.save(out / "config.json")


def _model_dir(path: str) -> Path:
    p = Path(path)
    d = p.parent if p.is_file() else p
    if not (d / "model.dgck").exists():
        raise CommandError(f"{d}: no model.dgck (train first)")
    return d


def _load_model(path: str):
    from . import model as M
    from .action_codec import ActionCodec
    from .obs_tokenizer import Codebook
    d = _model_dir(path)
    ck = M.load_checkpoint(d / "model.dgck")
    cb = Codebook.load(d / "codebook.dgcb")
    codec = ActionCodec.load(d / "codec.json")
    if ck.cfg.vocab != cb.D + 3 * codec.M:
        raise CommandError(f"{d}: checkpoint vocab {ck.cfg.vocab} != codebook/codec vocab {cb.D + 3 * codec.M}")
    return ck, cb, codec, d


def _scenarios(cfg, path: str | None):
    from .world_sim import Scenario, gen_scenario, scenario_seed
    if path:
        p = Path(path)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        if not files:
            raise CommandError(f"{p}: no scenario files")
        return [Scenario.load(f) for f in files]
    return [gen_scenario(scenario_seed(cfg.seed + cfg.eval.seed_offset, i), cfg.sim)
            for i in range(cfg.eval.n_scenarios)]


def _eval_cfg(cfg):
    from .evaluator import EvalConfig
    import dataclasses
    return EvalConfig(**{f.name: getattr(cfg.eval, f.name) for f in dataclasses.fields(EvalConfig)})


def _planner(ck, cb, codec, cfg, sample: bool = False):
    """Greedy unless ``sample``: then sampler.temperature / sampler.top_k apply."""
    from .sampler import ModelPlanner, SamplerConfig
    g = not sample
    scfg = SamplerConfig(cfg.sampler.temperature, cfg.sampler.top_k, g, cfg.seed)
    return ModelPlanner(ck.params, ck.cfg, cb, codec, g, scfg, ck.extra.get("action_positions", True))


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args) -> Path:
    from .dataset import write_raw
    from .world_sim import build_dataset
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw = build_dataset(cfg.data.n_seq, cfg.data.frames, cfg.data.frame_hz, cfg.sim, seed=cfg.seed,
                        profile=cfg.data.profile, keep_scenarios=True)
    write_raw(raw, out, cfg.sim)
    write_stamp(out, "gen-data", cfg, args)
    log.info("wrote %d sequences x %d frames to %s", cfg.data.n_seq, cfg.data.frames, out)
    return out


def cmd_fit(cfg, args) -> Path:
    import numpy as np
    from . import obs_tokenizer
    from .action_codec import ActionCodec
    from .dataset import read_raw, write_corpus
    data = Path(args.data)
    raw, meta = read_raw(data)
    n, T, H, W, C = raw.images.shape
    if (H, W) != (cfg.sim.height, cfg.sim.width):
        raise CommandError(f"dataset images {H}x{W} != config {cfg.sim.height}x{cfg.sim.width}")
    flat = raw.images.reshape(-1, H, W, C)
    rng = np.random.default_rng(cfg.seed)
    if len(flat) > cfg.tokenizer.max_images:
        flat = flat[np.sort(rng.choice(len(flat), cfg.tokenizer.max_images, replace=False))]
    imgs = flat.astype(np.float32) / 255.0
    if cfg.data.flips:
        imgs = np.concatenate([imgs, obs_tokenizer.hflip(imgs)])
    cb = obs_tokenizer.fit_codebook(imgs, cfg.tokenizer.D, cfg.tokenizer.S, seed=cfg.seed, iters=cfg.tokenizer.iters)
    acts = raw.actions.reshape(-1, 3)
    if cfg.data.flips:
        acts = np.concatenate([acts, acts * [1.0, -1.0, -1.0]])
    codec = ActionCodec.fit(acts, cfg.codec.M, cfg.codec.lo_pct, cfg.codec.hi_pct)
    out = Path(args.out) if args.out else data
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_corpus(out, raw, cb, codec, include_flips=cfg.data.flips,
                            extra={"quantization_mse": obs_tokenizer.quantization_mse(imgs[:256], cb)})
    write_stamp(out, "fit", cfg, args, [data / "raw.json"])
    log.info("codebook D=%d S=%d, codec M=%d; %d records", cb.D, cb.S, codec.M, len(manifest["records"]))
    return out


def cmd_train(cfg, args) -> Path:
    import dataclasses
    import shutil
    from . import model as M
    from .dataset import load_corpus
    from .training import save_log, train
    data = Path(args.data)
    corpus = load_corpus(data)
    m = corpus.manifest
    if (m["D"], m["M"]) != (cfg.tokenizer.D, cfg.codec.M):
        raise CommandError(f"corpus D={m['D']} M={m['M']} != config D={cfg.tokenizer.D} M={cfg.codec.M}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(corpus, cfg.model, cfg.train)
    extra = {"action_positions": cfg.train.action_positions, "tokens_per_frame": corpus.tpf,
             "frame_hz": m["frame_hz"], "grid": [m["H"] // m["S"], m["W"] // m["S"]],
             "steps": res.steps, "final_eval_loss": res.final_eval_loss, "config_digest": cfg.digest()}
    M.save_checkpoint(out / "model.dgck", res.params, cfg.model, res.opt, extra)
    shutil.copyfile(data / m["codebook"], out / "codebook.dgcb")
    shutil.copyfile(data / m["codec"], out / "codec.json")
    save_log(out / "train_log.json", res, cfg.train)
    write_stamp(out, "train", cfg, args, [data / "manifest.json"])
    log.info("trained %d steps in %.1fs, eval loss %.4f", res.steps, res.seconds, res.final_eval_loss)
    return out


def _seed_frames(cfg, cb, codec, n: int, frame_hz: float, data: str | None, index: int):
    """Seed frames from a dataset record, or rendered fresh from a generated scenario."""
    import numpy as np
    from .dataset import load_corpus, tokenize_sequence
    from .language import VocabLayout, deserialize
    from .world_sim import gen_scenario, scenario_frames, scenario_seed
    L = VocabLayout(cb.D, codec.M)
    if data:
        corpus = load_corpus(data)
        if corpus.frames < n:
            raise CommandError(f"dataset sequences have {corpus.frames} frames, need {n}")
        toks, tpf = corpus.tokens[index][:n * corpus.tpf], corpus.tpf
    else:
        sc = gen_scenario(scenario_seed(cfg.seed + cfg.eval.seed_offset, index), cfg.sim)
        imgs, acts, _ = scenario_frames(sc, cfg.sim, n, frame_hz)
        toks = tokenize_sequence(imgs, acts, cb, codec, L)
        tpf = toks.size // n
    grid = int(round(np.sqrt(tpf - 3)))
    return deserialize(toks, L, tpf, (grid, grid)), L


def cmd_generate(cfg, args) -> Path:
    import numpy as np
    from . import obs_tokenizer
    from .dataset import write_record
    from .language import serialize
    from .sampler import RolloutConfig, SamplerConfig, long_rollout
    ck, cb, codec, _ = _load_model(args.checkpoint)
    rc = RolloutConfig(cfg.rollout.window_generate, cfg.rollout.window_condition,
                       args.total_frames or cfg.rollout.total_frames)
    frame_hz = ck.extra.get("frame_hz", cfg.data.frame_hz)
    seed_seq, L = _seed_frames(cfg, cb, codec, rc.window_condition, frame_hz, args.data, args.index)
    scfg = SamplerConfig(cfg.sampler.temperature, cfg.sampler.top_k, cfg.sampler.greedy, cfg.seed)
    gen = long_rollout(ck.params, ck.cfg, seed_seq, L, rc, scfg, ck.extra.get("action_positions", True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    actions = codec.decode_array(gen.action_bins())
    write_record(out / "rollout.dgsq", serialize(gen, L), actions, seed_seq[0].grid.size + 3)
    frames = [obs_tokenizer.decode(f.grid, cb) for f in list(seed_seq.frames) + list(gen.frames)]
    strip = (np.clip(np.concatenate(frames, axis=1), 0, 1) * 255).round().astype(np.uint8)
    _write_png(out / "strip.png", strip)
    if args.dump_frames:
        (out / "frames").mkdir(exist_ok=True)
        for i, f in enumerate(frames):
            _write_png(out / "frames" / f"frame_{i:04d}.png", (np.clip(f, 0, 1) * 255).round().astype(np.uint8))
    write_stamp(out, "generate", cfg, args, [_model_dir(args.checkpoint) / "model.dgck"])
    log.info("generated %d frames (%d seed) to %s", len(gen), len(seed_seq), out)
    return out


def _write_png(path: Path, img) -> None:
    from PIL import Image
    Image.fromarray(img).save(path)


def cmd_plan(cfg, args) -> Path:
    from .evaluator import make_request, score_plan, trajectory_xyt
    from .world_sim import Scenario
    ck, cb, codec, _ = _load_model(args.checkpoint)
    sc = Scenario.load(args.scenario)
    ecfg = _eval_cfg(cfg)
    req = make_request(sc, cfg.sim, ecfg)
    planner = _planner(ck, cb, codec, cfg, args.sample)
    res = planner.predict(req)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"scenario": sc.seed, "poses": trajectory_xyt(res.trajectory).tolist(), "actions": res.actions.tolist(),
           "bins": res.bins.tolist(), "scores": score_plan(res.trajectory, req, ecfg)}
    (out / "trajectory.json").write_text(json.dumps(doc, indent=2))
    write_stamp(out, "plan", cfg, args, [Path(args.scenario)])
    log.info("planned %d steps, PDMS %.3f", len(res.trajectory), doc["scores"]["pdms"])
    return out


def cmd_evaluate(cfg, args) -> Path:
    from .evaluator import evaluate_requests, format_table, make_request
    ck, cb, codec, _ = _load_model(args.checkpoint)
    ecfg = _eval_cfg(cfg)
    reqs = [make_request(sc, cfg.sim, ecfg) for sc in _scenarios(cfg, args.scenarios)]
    rep = evaluate_requests(_planner(ck, cb, codec, cfg, args.sample), reqs, ecfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "report.json")
    (out / "table.txt").write_text(format_table({"model": rep}) + "\n")
    write_stamp(out, "evaluate", cfg, args, [_model_dir(args.checkpoint) / "model.dgck"])
    print(format_table({"model": rep}))
    return out


def cmd_ablate(cfg, args) -> Path:
    from .evaluator import ablate_copy, constant_velocity_planner, evaluate_requests, format_table, make_request
    which = args.which.split(",") if args.which else list(ABLATIONS)
    bad = [w for w in which if w not in ABLATIONS]
    if bad:
        raise CommandError(f"unknown ablation(s) {bad}; choose from {list(ABLATIONS)}")
    ck, cb, codec, _ = _load_model(args.checkpoint)
    ecfg = _eval_cfg(cfg)
    reqs = [make_request(sc, cfg.sim, ecfg) for sc in _scenarios(cfg, args.scenarios)]
    planner = _planner(ck, cb, codec, cfg, args.sample)
    reports = {"model": evaluate_requests(planner, reqs, ecfg)}
    for w in which:
        if w.startswith("copy-"):
            comp = w[len("copy-"):]
            fn = lambda r, c=comp: ablate_copy(c, planner.predict(r).actions, r.actions)  # noqa: E731
            reports[w] = evaluate_requests(fn, reqs, ecfg)
        elif w == "const-vel":
            reports[w] = evaluate_requests(constant_velocity_planner, reqs, ecfg)
        else:
            if not args.variant:
                raise CommandError("no-action-posemb needs --variant (a checkpoint trained with "
                                   "train.action_positions=false)")
            vck, vcb, vcodec, _ = _load_model(args.variant)
            if vck.extra.get("action_positions", True):
                raise CommandError(f"{args.variant} was trained with action positions; expected a zeroed variant")
            reports[w] = evaluate_requests(_planner(vck, vcb, vcodec, cfg, args.sample), reqs, ecfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps({k: r.summary() for k, r in reports.items()}, indent=2))
    write_stamp(out, "ablate", cfg, args, [_model_dir(args.checkpoint) / "model.dgck"])
    print(table)
    return out


COMMANDS = {"gen-data": cmd_gen_data, "fit": cmd_fit, "train": cmd_train, "generate": cmd_generate,
            "plan": cmd_plan, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: $DRIVELM_CONFIG, else built-in preset)")
    common.add_argument("--preset", default="desk", help="built-in config when no file is given (desk, planning)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. model.layers=2 (repeatable)")
    common.add_argument("--seed", type=int, help="overrides seed, model.seed and train.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drivelm", description="Driving-language world model and planner at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate and render a dataset")
    s = sub.add_parser("fit", parents=[common], help="fit codebook + action codec and tokenize a dataset")
    s.add_argument("--data", required=True)
    s = sub.add_parser("train", parents=[common], help="train a model on a tokenized dataset")
    s.add_argument("--data", required=True)
    s = sub.add_parser("generate", parents=[common], help="long rollout from seed frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="take seed frames from this dataset (default: a fresh scenario)")
    s.add_argument("--index", type=int, default=0, help="dataset sequence / scenario index")
    s.add_argument("--total-frames", type=int)
    s.add_argument("--dump-frames", action="store_true", help="also write one PNG per frame")
    s = sub.add_parser("plan", parents=[common], help="plan one scenario")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--sample", action="store_true", help="sample actions instead of greedy decoding")
    for name in ("evaluate", "ablate"):
        s = sub.add_parser(name, parents=[common], help=f"{name} on a scenario set")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--scenarios", help="scenario file or directory (default: generated held-out set)")
        s.add_argument("--sample", action="store_true", help="sample actions instead of greedy decoding")
        if name == "ablate":
            s.add_argument("--which", help=f"comma list of {','.join(ABLATIONS)} (default: all)")
            s.add_argument("--variant", help="checkpoint trained without action positions")
    return p


def _resolve_config(args):
    from .config import apply_overrides, load_config, preset
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"model.seed={args.seed}", f"train.seed={args.seed}"]
    base = None if (args.config or os.environ.get("DRIVELM_CONFIG")) else preset(args.preset)
    return load_config(args.config, overrides, base=base)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    from .config import ConfigError
    try:
        cfg = _resolve_config(args)
        if args.out is None and args.command != "fit":
            raise CommandError("--out is required")
        COMMANDS[args.command](cfg, args)
        return 0
    except ConfigError as exc:
        _error_record(args, exc, exc.problems)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable record
        _error_record(args, exc)
        return 1


def _error_record(args, exc: Exception, problems: list[str] | None = None) -> None:
    rec = {"ok": False, "command": args.command, "error": type(exc).__name__, "message": str(exc)}
    if problems:
        rec["problems"] = problems
    print(json.dumps(rec), file=sys.stderr)
    if args.out and Path(args.out).is_dir():
        (Path(args.out) / "error.json").write_text(json.dumps(rec, indent=2))


if __name__ == "__main__":
    sys.exit(main())
