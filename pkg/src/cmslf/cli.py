"""Command-line entry points: render, reconstruct, evaluate, probe.

Configs are YAML.  A render config names (or inlines) a rig, an optional
spectral model and a scene::

    rig: rig_desk.yaml          # path relative to this file, or a mapping
    spectral: {}                # optional, defaults to the built-in tables
    scene:
      objects:
        - type: sphere          # sphere | blob | mesh
          center: [0, 0, 128]
          radius: 20
          material: {coefficients: [0.7, 0.1, -0.05], specular: 0.3, shininess: 8}
    noise_sigma: 0.0
    seed: 0

A reconstruct config holds the fields of ``ReconstructOptions``; the sweep
options go under ``sweep``.  Exit codes: 0 success, 1 runtime failure,
2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import hashlib
from dataclasses import asdict
import json
import logging
import os
from pathlib import Path
import sys
import time

import numpy as np
import yaml

from . import io
from .consistency import (DIFFUSE, INVALID, LABEL_NAMES, SPECULAR, SweepOptions, lobe_misfit,
                          sweep_pixels)
from .evaluate import evaluate_maps, write_previews, write_report
from .msscam import Sampler
from .renderer import render_lightfield
from .rig import RigConfig, center_view_points
from .scene import scene_from_config
from .spectral import spectral_from_config
from .surface import ReconstructOptions, reconstruct

log = logging.getLogger("cmslf")

THREADS_ENV = "CMSLF_THREADS"


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration

def load_yaml(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: file not found")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{p}:{mark.line + 1}" if mark is not None else str(p)
        raise ConfigError(f"{where}: {getattr(e, 'problem', None) or e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def _section(cfg: dict, key: str, base: Path, required: bool = True) -> dict:
    val = cfg.get(key)
    if val is None:
        if required:
            raise ConfigError(f"missing '{key}' section")
        return {}
    if isinstance(val, str):
        return load_yaml(base / val)
    if not isinstance(val, dict):
        raise ConfigError(f"'{key}' must be a path or a mapping")
    return val


def build_render_inputs(path):
    """Rig, spectral model, scene, noise sigma and seed from a render config."""
    p = Path(path)
    cfg = load_yaml(p)
    base = p.parent
    try:
        rig = RigConfig.from_dict(_section(cfg, "rig", base))
        spectral = spectral_from_config(_section(cfg, "spectral", base, required=False),
                                        rig.wavelengths)
        scene_cfg = _section(cfg, "scene", base)
        for obj in scene_cfg.get("objects", []):
            if obj.get("type") == "mesh" and not Path(obj["path"]).is_absolute():
                obj["path"] = str(base / obj["path"])
        scene = scene_from_config(scene_cfg, spectral.basis_dim)
    except ConfigError as e:
        raise ConfigError(f"{p}: {e}") from None
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"{p}: invalid configuration: {e}") from None
    return rig, spectral, scene, float(cfg.get("noise_sigma", 0.0)), int(cfg.get("seed", 0))


def build_reconstruct_options(path=None, passes=None, tau_c=None) -> ReconstructOptions:
    cfg = {} if path is None else load_yaml(path)
    try:
        if passes is not None:
            cfg["passes"] = passes
        if tau_c is not None:
            cfg.setdefault("sweep", {})
            cfg["sweep"] = dict(cfg["sweep"] or {}, diffuse_threshold=tau_c)
        return ReconstructOptions(**cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'options'}: invalid configuration: {e}") from None


def set_threads(count: int | None) -> int:
    """Limit the compiled kernels' worker threads; returns the count in use."""
    import numba

    if count is None:
        env = os.environ.get(THREADS_ENV)
        count = int(env) if env else numba.config.NUMBA_NUM_THREADS
    if count < 1:
        raise ConfigError("thread count must be positive")
    count = min(count, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(count)
    return count


# ----------------------------------------------------------------------
# commands

def cmd_render(args) -> int:
    rig, spectral, scene, noise, seed = build_render_inputs(args.config)
    if args.seed is not None:
        seed = args.seed
    if args.noise is not None:
        noise = args.noise
    t = time.perf_counter()
    lf = render_lightfield(scene, rig, spectral, noise_sigma=noise, seed=seed)
    path = io.save_lightfield(lf, args.out)
    log.info("rendered %d views in %.1fs -> %s", lf.images.shape[0] * lf.images.shape[1],
             time.perf_counter() - t, path)
    return 0


def cmd_reconstruct(args) -> int:
    opts = build_reconstruct_options(args.config, args.passes, args.tau_c)
    lf = io.load_lightfield(args.data, ground_truth=False)
    t = time.perf_counter()
    est = reconstruct(lf, opts)
    log.info("reconstructed in %.1fs", time.perf_counter() - t)
    labels = est.label[est.mask]
    summary = {
        "pixels": int(est.mask.sum()),
        "labels": {LABEL_NAMES[k]: int((labels == k).sum()) for k in (DIFFUSE, SPECULAR)},
        "options": asdict(opts),
        "manifest_sha256": hashlib.sha256(io.manifest_path(args.data).read_bytes()).hexdigest(),
    }
    out = Path(args.out)
    io.save_estimate(est, lf.rig, out, summary)
    write_previews(out, est.to_arrays(), lf.spectral)
    return 0


def cmd_evaluate(args) -> int:
    lf = io.load_lightfield(args.data)
    if not lf.ground_truth:
        raise ConfigError(f"{args.data}: dataset has no ground truth")
    est = io.load_estimate(args.estimate)
    report, maps = evaluate_maps(est, lf.ground_truth, lf.spectral)
    write_report(args.out, report, maps, lf.spectral)
    for k, v in report.rows():
        print(f"{k},{v}")
    return 0


def cmd_probe(args) -> int:
    lf = io.load_lightfield(args.data, ground_truth=False)
    rig = lf.rig
    if not (0 <= args.u <= rig.image_width - 1 and 0 <= args.v <= rig.image_height - 1):
        raise ConfigError(f"pixel ({args.u}, {args.v}) outside the "
                          f"{rig.image_width}x{rig.image_height} image")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = Sampler(lf.images, rig)
    u, v = np.array([float(args.u)]), np.array([float(args.v)])
    r = sweep_pixels(sampler, rig, u, v, SweepOptions(), spectral=lf.spectral)
    label = int(r.label[0])
    info = {"u": args.u, "v": args.v, "label": LABEL_NAMES[label]}
    if label == INVALID:
        info["note"] = "background pixel: no curves"
        (out / "probe.json").write_text(json.dumps(info, indent=1))
        print(f"pixel ({args.u}, {args.v}) is background")
        return 0
    z = rig.depths
    X = center_view_points(np.full(z.size, u[0]), np.full(z.size, v[0]), z, rig)
    M, mask = sampler.sample(X)
    S = lobe_misfit(M, mask, X, rig, lf.spectral)
    C = r.C_curve[0]
    info.update(depth=float(r.depth[0]), C=float(r.C[0]))
    with open(out / "curves.csv", "w") as f:
        f.write("z,C,S\n")
        for k in range(z.size):
            f.write(f"{z[k]!r},{float(C[k])!r},{float(S[k])!r}\n")
    best = center_view_points(u, v, np.array([r.depth[0]]), rig)
    Mb, mb = sampler.sample(best)
    io.write_pfm(out / "msscam.pfm", np.where(mb[0], Mb[0], 0.0).astype(np.float32))
    _plot_probe(out, z, C, S, np.where(mb[0], Mb[0], np.nan), rig)
    (out / "probe.json").write_text(json.dumps(info, indent=1))
    print(f"pixel ({args.u}, {args.v}): {info['label']}, depth {info['depth']:.3f}")
    return 0


def _plot_probe(out: Path, z, C, S, M, rig: RigConfig) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Software": None}
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(z, C)
    ax[0].set_xlabel("depth")
    ax[0].set_title("photo-consistency C")
    ax[1].plot(z, S)
    ax[1].set_xlabel("depth")
    ax[1].set_title("lobe misfit S")
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100, metadata=meta)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ang = np.degrees(rig.spoke_angles)
    for j in range(M.shape[1]):
        ax.plot(ang, M[:, j], marker=".", label=f"{rig.wavelengths[j]:.0f} nm")
    ax.set_xlabel("spoke angle (deg)")
    ax.set_ylabel("intensity")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(out / "msscam_columns.png", dpi=100, metadata=meta)
    plt.close(fig)


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmslf", description="Concentric multi-spectral light-field "
                                "rendering and shape/reflectance recovery.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a light-field dataset")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--noise", type=float, default=None, help="noise sigma relative to max")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("reconstruct", help="recover depth, normals and reflectance")
    c.add_argument("--data", required=True, help="dataset directory or manifest")
    c.add_argument("--out", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--passes", type=int, default=None)
    c.add_argument("--tau-c", type=float, default=None, help="diffuse/specular threshold")
    c.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="compare an estimate with ground truth")
    e.add_argument("--estimate", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("probe", help="depth-sweep curves and MSS-Cam of one pixel")
    q.add_argument("--data", required=True)
    q.add_argument("--u", type=int, required=True)
    q.add_argument("--v", type=int, required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except (ConfigError, io.DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  report, do not dump a traceback
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
