"""Command-line surface: model generation, rendering, animation, training,
gradient verification, benchmarking, and the render service.

Heavy imports happen inside commands so CVTHEAD_THREADS can cap the BLAS
thread pool before numpy loads.
"""
from __future__ import annotations

import json
import logging
import os
import sys

import click

_threads = os.environ.get("CVTHEAD_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

logging.basicConfig(level=os.environ.get("CVTHEAD_LOG", "WARNING").upper())
log = logging.getLogger("cvthead")


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _load_model(path):
    from .head_model import load_model

    if not os.path.exists(path):
        _fail(f"model file not found: {path}")
    try:
        return load_model(path)
    except Exception as e:
        _fail(f"cannot load model {path}: {e}")


def _load_bundle(model, weights_path, seed=0):
    from .pipeline import default_bundle, load_bundle

    if weights_path is None:
        return default_bundle(model, seed=seed)
    if not os.path.exists(weights_path):
        _fail(f"weights file not found: {weights_path}")
    try:
        return load_bundle(weights_path)
    except Exception as e:
        _fail(f"cannot load weights {weights_path}: {e}")


def _read_params(model, path):
    from .pipeline import parse_params

    if not os.path.exists(path):
        _fail(f"params file not found: {path}")
    try:
        obj = json.loads(open(path).read())
    except json.JSONDecodeError as e:
        _fail(f"params file {path} is not valid JSON: {e}")
    try:
        return parse_params(model, obj)
    except Exception as e:
        _fail(f"invalid params in {path}: {e}")


@click.group()
def main():
    """Controllable head avatars: parametric mesh, vertex-feature transformer,
    point splatting, neural rendering."""


@main.command("gen-model")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--n-vertices", type=int, default=5023, show_default=True)
@click.option("--n-coarse", type=int, default=314, show_default=True)
@click.option("--shape-dims", type=int, default=20, show_default=True)
@click.option("--expr-dims", type=int, default=10, show_default=True)
def gen_model(seed, out, n_vertices, n_coarse, shape_dims, expr_dims):
    """Generate a deterministic synthetic head model."""
    from .head_model import generate_synthetic_model, save_model

    model = generate_synthetic_model(seed, n_vertices=n_vertices, n_coarse=n_coarse,
                                     shape_dims=shape_dims, expr_dims=expr_dims)
    save_model(model, out)
    click.echo(f"wrote {out}: {model.n_vertices} vertices, {model.n_coarse} coarse")


@main.command("render")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--params", "params_path", type=click.Path(), required=True)
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["depth", "splat", "neural", "oracle"]),
              default="neural", show_default=True)
@click.option("--size", type=int, default=256, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--albedo-seed", type=int, default=0, show_default=True)
def render_cmd(model_path, params_path, weights_path, mode, size, out, albedo_seed):
    """Render one frame to a PNG."""
    from .pipeline import AvatarSession, png_bytes

    model = _load_model(model_path)
    bundle = _load_bundle(model, weights_path)
    params = _read_params(model, params_path)
    session = AvatarSession(model, bundle, albedo_seed=albedo_seed)
    try:
        image, timing = session.render_frame(params, mode, size, size)
    except Exception as e:
        _fail(f"render failed: {e}")
    with open(out, "wb") as f:
        f.write(png_bytes(image))
    click.echo(f"wrote {out} ({mode}, {size}x{size}, "
               + ", ".join(f"{k}={v:.1f}" for k, v in timing.items()) + ")")


@main.command("animate")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--params", "params_path", type=click.Path(), required=True,
              help="JSONL file, one params object per line")
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["depth", "splat", "neural", "oracle"]),
              default="neural", show_default=True)
@click.option("--size", type=int, default=256, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--albedo-seed", type=int, default=0, show_default=True)
def animate(model_path, params_path, weights_path, mode, size, out_dir, albedo_seed):
    """Render a parameter sequence to numbered frames plus a timing manifest."""
    from .pipeline import AvatarSession, png_bytes

    model = _load_model(model_path)
    if not os.path.exists(params_path):
        _fail(f"params file not found: {params_path}")

    from .pipeline import parse_params

    sequence = []
    with open(params_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                sequence.append(parse_params(model, obj))
            except Exception as e:
                _fail(f"line {lineno}: {e}")
    if not sequence:
        _fail("params file contains no frames")

    bundle = _load_bundle(model, weights_path)
    session = AvatarSession(model, bundle, albedo_seed=albedo_seed)
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for i, params in enumerate(sequence):
        image, timing = session.render_frame(params, mode, size, size)
        name = f"frame_{i:06d}.png"
        with open(os.path.join(out_dir, name), "wb") as f:
            f.write(png_bytes(image))
        manifest.append({"file": name, "timing_ms": timing})
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump({"mode": mode, "size": size, "frames": manifest}, f, indent=2)
    click.echo(f"wrote {len(sequence)} frames to {out_dir}")


@main.command("train-toy")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--out-weights", type=click.Path(), required=True)
@click.option("--curve", "curve_path", type=click.Path(), default=None)
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pairs", type=int, default=8, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--early-stop-psnr", type=float, default=None)
@click.option("--early-stop-dice", type=float, default=None)
def train_toy_cmd(model_path, out_weights, curve_path, steps, lr, seed, pairs, size,
                  early_stop_psnr, early_stop_dice):
    """Overfit the toy pipeline on oracle-rendered reenactment pairs."""
    from . import vertex_transformer as vt
    from .pipeline import WeightBundle, save_bundle
    from .training import make_toy_dataset, save_curve_csv, train_toy

    model = _load_model(model_path)
    dataset = make_toy_dataset(model, n_pairs=pairs, size=size, seed=seed)

    def log_fn(step, comps, elapsed):
        click.echo(f"step {step}: total={comps['total']:.4f} l1={comps['l1']:.4f} "
                   f"dice={comps['dice']:.4f} [{elapsed:.0f}s]")

    weights, curve, tcfg, rcfg = train_toy(
        model, dataset, steps=steps, lr=lr, seed=seed,
        early_stop_psnr=early_stop_psnr, early_stop_dice=early_stop_dice,
        log_fn=log_fn)
    save_bundle(out_weights, WeightBundle(weights, tcfg, rcfg))
    if curve_path:
        save_curve_csv(curve, curve_path)
    click.echo(f"wrote {out_weights} after {len(curve)} steps")


@main.command("gradcheck")
@click.option("--op", default="all", show_default=True,
              help="op name or 'all'")
@click.option("--seeds", type=int, default=3, show_default=True)
@click.option("--rel-tol", type=float, default=1e-3, show_default=True)
def gradcheck_cmd(op, seeds, rel_tol):
    """Verify analytic gradients against finite differences; nonzero exit on failure."""
    from .numerics import standard_checks
    from .verification import pipeline_checks

    checks = standard_checks()
    checks.update(pipeline_checks())
    if op != "all":
        if op not in checks:
            _fail(f"unknown op {op!r}; known: {', '.join(sorted(checks))}")
        checks = {op: checks[op]}

    failed = False
    for name in sorted(checks):
        worst = 0.0
        ok = True
        for seed in range(seeds):
            rep = checks[name](seed)
            worst = max(worst, rep.max_rel_err)
            ok = ok and rep.passed and rep.max_rel_err <= rel_tol
        status = "pass" if ok else "FAIL"
        click.echo(f"{name:24s} {status}  max_rel_err={worst:.3e}")
        failed = failed or not ok
    sys.exit(1 if failed else 0)


@main.command("bench")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@click.option("--iters", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=256, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="write JSON report here")
def bench_cmd(model_path, weights_path, iters, size, out):
    """Per-stage timing report (median/p95) and end-to-end FPS."""
    from .pipeline import run_bench

    model = _load_model(model_path)
    bundle = _load_bundle(model, weights_path)
    report = run_bench(model, bundle, size=size, iters=iters)
    text = json.dumps(report, indent=2)
    if out:
        with open(out, "w") as f:
            f.write(text)
    click.echo(text)


@main.command("serve")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8089, show_default=True)
@click.option("--frame-size", type=int, default=256, show_default=True)
@click.option("--max-frame-size", type=int, default=512, show_default=True)
@click.option("--default-mode", type=click.Choice(["depth", "splat", "neural", "oracle"]),
              default="neural", show_default=True)
@click.option("--albedo-seed", type=int, default=0, show_default=True)
def serve_cmd(model_path, weights_path, host, port, frame_size, max_frame_size,
              default_mode, albedo_seed):
    """Run the HTTP/WebSocket render service."""
    import uvicorn

    from .service.app import ServiceConfig, create_app

    if not 1 <= port <= 65535:
        _fail(f"port {port} out of range")
    model = _load_model(model_path)
    bundle = _load_bundle(model, weights_path)
    config = ServiceConfig(frame_size=frame_size, max_frame_size=max_frame_size,
                           default_mode=default_mode, albedo_seed=albedo_seed)
    app = create_app(model, bundle, config)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
