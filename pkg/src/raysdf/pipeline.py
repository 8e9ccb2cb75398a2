"""End-to-end commands: synth, fit-sdf, train, infer, eval, gradcheck.

Every command is a pure function of (inputs on disk, config, seed); run
directories echo the fully resolved configuration so any run can be
reproduced from its own artifacts.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import reports
from .arrayio import load_array, save_array
from .config import PipelineConfig, save_config
from .diffusion import (
    DenoiserNet,
    OracleDenoiser,
    condition,
    diffusion_loss,
    forward_noise,
    make_schedule,
    sample_bundles,
    train_denoiser,
)
from .errors import (
    ConfigError,
    DegenerateBundleError,
    DivergenceError,
    EmptySurfaceError,
    InputDomainError,
)
from .mesh import marching_cubes, save_obj
from .metrics import rotation_accuracy, surface_metrics, translation_accuracy
from .nn import AdamState, adam_step, grad_check
from .rays import bundle_to_flat, recover_camera
from .triplane import TriplaneSDF, fit_triplane, make_supervision, on_surface_loss


# ---------------------------------------------------------------------------
# checkpoint plumbing

def save_params(directory, arrays, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, arr in enumerate(arrays):
        save_array(directory / f"param_{i:03d}.arr", arr)
    meta = dict(meta, n_params=len(arrays))
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_params(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    arrays = [
        load_array(directory / f"param_{i:03d}.arr") for i in range(meta["n_params"])
    ]
    return arrays, meta


def save_triplane(directory, tp: TriplaneSDF, extra: dict = None) -> None:
    save_params(
        directory,
        tp.params,
        dict(
            extra or {},
            kind="triplane",
            resolution=tp.resolution,
            channels=tp.channels,
            posenc_bands=tp.posenc_bands,
        ),
    )


def load_triplane(directory) -> TriplaneSDF:
    arrays, meta = load_params(directory)
    # arrays = [planes, W1, b1, W2, b2, ...]; hidden widths are the output
    # sizes of every decoder weight except the last
    hidden = [w.shape[1] for w in arrays[1::2]][:-1]
    tp = TriplaneSDF(
        resolution=meta["resolution"],
        channels=meta["channels"],
        decoder_hidden=tuple(hidden),
        posenc_bands=meta["posenc_bands"],
    )
    tp.set_params(arrays)
    return tp


def save_denoiser(directory, net: DenoiserNet) -> None:
    save_params(
        directory,
        net.params,
        {
            "kind": "denoiser",
            "feature_dim": net.feature_dim,
            "hidden": net.hidden,
            "head_hidden": net.head_hidden,
        },
    )


def load_denoiser(directory) -> DenoiserNet:
    arrays, meta = load_params(directory)
    net = DenoiserNet(
        feature_dim=meta["feature_dim"],
        hidden=meta["hidden"],
        head_hidden=meta.get("head_hidden"),
    )
    net.set_params(arrays)
    return net


def _echo_config(cfg: PipelineConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: PipelineConfig, out_dir) -> dict:
    """Generate the train and eval dataset splits."""
    out_dir = Path(out_dir)
    _echo_config(cfg, out_dir)
    echo = cfg.to_dict()
    splits = {}
    for split, n, seed_off in (
        ("train", cfg.data.n_scenes, 0),
        ("eval", cfg.data.n_eval_scenes, 1),
    ):
        splits[split] = ds.build_dataset(
            out_dir / split,
            n_scenes=n,
            rng_seed=cfg.seed * 2 + seed_off,
            n_views=cfg.data.n_views or None,
            rays_per_image=cfg.data.rays_per_image,
            feature_dim=cfg.data.feature_dim,
            shape_mix=cfg.data.shape_mix,
            config_echo=echo,
        )
    return {"out": str(out_dir), "splits": {k: len(v) for k, v in splits.items()}}


def fit_scene_triplane(scene, cfg: PipelineConfig, rng) -> tuple:
    """Fit one scene's triplane from analytic supervision.

    Returns (FitResult, supervision points, supervision targets).
    """
    pts, targets = make_supervision(
        scene.shape, rng, n_samples=cfg.triplane.n_supervision
    )
    tp = TriplaneSDF(
        resolution=cfg.triplane.resolution, channels=cfg.triplane.channels, rng=rng
    )
    result = fit_triplane(
        tp,
        pts,
        targets,
        steps=cfg.triplane.fit_steps,
        plane_lr=cfg.triplane.lr_planes,
        decoder_lr=cfg.triplane.lr_decoder,
        rng=rng,
    )
    return result, pts, targets


def cmd_fit_sdf(dataset_dir, cfg: PipelineConfig, out_dir) -> dict:
    """Fit one triplane checkpoint per scene; divergences are reported,
    not fatal."""
    out_dir = Path(out_dir)
    _echo_config(cfg, out_dir)
    data = ds.open_dataset(dataset_dir)
    rows = []
    failures = []
    for i, name in enumerate(data.scene_names):
        scene = data.load_scene(name)
        rng = np.random.default_rng([cfg.seed, 1000, i])
        try:
            result, pts, targets = fit_scene_triplane(scene, cfg, rng)
        except DivergenceError as exc:
            failures.append({"scene": name, "error": str(exc)})
            continue
        scene_dir = out_dir / name
        save_triplane(scene_dir, result.field)
        save_array(scene_dir / "supervision_points.arr", pts)
        save_array(scene_dir / "supervision_targets.arr", targets)
        save_array(scene_dir / "fit_losses.arr", result.losses)
        rows.append(
            {
                "scene": name,
                "final_loss": float(np.median(result.losses[-50:]))
                if len(result.losses)
                else float("nan"),
            }
        )
    reports.write_csv(rows, out_dir / "fit_losses.csv")
    if failures:
        reports.write_json(failures, out_dir / "failures.json")
    return {"fitted": len(rows), "failed": len(failures)}


def _load_training_set(data: ds.DatasetOnDisk, fits_dir, disable_sdf: bool):
    entries = []
    for name in data.scene_names:
        scene = data.load_scene(name)
        rows = np.concatenate([bundle_to_flat(b) for b in scene.bundles])
        feats = scene.features.reshape(-1, scene.features.shape[-1])
        tp = None
        if not disable_sdf:
            tp = load_triplane(Path(fits_dir) / name)
        entries.append((rows, feats, tp, len(scene.bundles)))
    return entries


def cmd_train(dataset_dir, fits_dir, cfg: PipelineConfig, out_dir) -> dict:
    """Train the ray denoiser on a dataset with fitted triplanes."""
    out_dir = Path(out_dir)
    _echo_config(cfg, out_dir)
    disable_sdf = cfg.ablation == "no_sdf_conditioning"
    data = ds.open_dataset(dataset_dir)
    if not disable_sdf and fits_dir is None:
        raise ConfigError("training needs fitted triplanes unless no_sdf_conditioning")
    entries = _load_training_set(data, fits_dir, disable_sdf)
    schedule = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    rng = np.random.default_rng([cfg.seed, 2000])
    net, losses = train_denoiser(
        entries,
        schedule,
        rng,
        steps=cfg.diffusion.train_steps,
        lr=cfg.diffusion.lr,
        hidden=cfg.diffusion.hidden,
        head_hidden=cfg.diffusion.head_hidden,
        disable_sdf=disable_sdf,
        coarse_frac=cfg.diffusion.coarse_frac,
        fine_lr_scale=cfg.diffusion.fine_lr_scale,
    )
    save_denoiser(out_dir / "denoiser", net)
    save_array(out_dir / "train_losses.arr", losses)
    reports.write_csv(
        [{"step": i, "loss": float(l)} for i, l in enumerate(losses)],
        out_dir / "train_losses.csv",
    )
    reports.loss_curve_figure(losses, out_dir / "train_losses.png", "denoiser loss")
    return {"steps": len(losses), "final_loss": float(np.median(losses[-200:]))}


class _JointRefiner:
    """Triplane refinement interleaved with the reverse chain.

    Minimizes lambda_surf * on_surface_loss(current endpoints) plus the
    data-fit anchor on the original supervision. A guard reverts any
    refinement block that would push the anchor loss above 2x its
    pre-loop value.
    """

    def __init__(self, tp, pts, targets, cfg: PipelineConfig, rng):
        self.tp = tp
        self.pts = pts
        self.targets = targets
        self.cfg = cfg
        self.rng = rng
        self.lam = cfg.joint.lambda_surf
        self.state = AdamState.for_params(tp.params, lr=1e-3)
        probe = rng.integers(0, len(pts), size=min(2048, len(pts)))
        self.probe_pts = pts[probe]
        self.probe_targets = targets[probe]
        self.anchor0 = self._anchor_loss()
        self.frozen = False
        self.blocks = 0

    def _anchor_loss(self) -> float:
        s, _ = self.tp.query(self.probe_pts)
        return float(np.mean((s - self.probe_targets) ** 2))

    def refine(self, endpoints: np.ndarray) -> None:
        if self.frozen or len(endpoints) == 0:
            return
        backup = [p.copy() for p in self.tp.params]
        for _ in range(self.cfg.joint.refinement_steps):
            surf_loss, surf_grads, _ = on_surface_loss(self.tp, endpoints)
            idx = self.rng.integers(0, len(self.pts), size=512)
            s, cache = self.tp.query(self.pts[idx])
            err = s - self.targets[idx]
            plane_g, dec_g, _ = self.tp.query_backward(cache, 2.0 * err / len(idx))
            anchor_grads = [plane_g] + dec_g
            grads = [
                self.lam * sg + ag for sg, ag in zip(surf_grads, anchor_grads)
            ]
            adam_step(self.state, self.tp.params, grads)
        if self._anchor_loss() > 2.0 * self.anchor0:
            self.tp.set_params(backup)
            self.frozen = True
        else:
            self.blocks += 1


def infer_scene(
    scene,
    tp,
    supervision,
    net,
    cfg: PipelineConfig,
    rng,
    oracle: bool = False,
):
    """Joint pose sampling + surface refinement for one scene.

    Returns (est cameras or None, bundles or None, refined tp, mesh or
    None, flags dict).
    """
    schedule = make_schedule(
        cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end
    )
    flags = {"degenerate": False, "empty_surface": False, "refine_blocks": 0}
    est_cams = None
    bundles = None
    if cfg.ablation != "no_ray_diffuser":
        pts, targets = supervision
        refiner = _JointRefiner(tp, pts, targets, cfg, rng)
        period = max(1, cfg.joint.alternation_period)

        def callback(t, endpoints, degen):
            if t > 0 and t % period == 0:
                refiner.refine(endpoints[~degen])

        if oracle:
            R0 = np.concatenate([bundle_to_flat(b) for b in scene.bundles])
            model = OracleDenoiser(R0, schedule)
        else:
            model = net
        pixels = np.stack([b.pixels for b in scene.bundles])
        try:
            bundles = sample_bundles(
                model,
                tp,
                scene.features,
                pixels,
                schedule,
                rng,
                deterministic=cfg.diffusion.deterministic_sampling,
                disable_sdf=cfg.ablation == "no_sdf_conditioning",
                step_callback=callback,
            )
        except DegenerateBundleError:
            flags["degenerate"] = True
            bundles = None
        if bundles is not None:
            endpoints = np.concatenate(
                [np.cross(f[:, :3], f[:, 3:6]) + f[:, 6:7] * f[:, :3]
                 for f in map(bundle_to_flat, bundles)]
            )
            refiner.refine(endpoints)
            est_cams = []
            for b, template in zip(bundles, scene.cameras):
                try:
                    est_cams.append(recover_camera(b, template))
                except DegenerateBundleError:
                    flags["degenerate"] = True
                    est_cams = None
                    break
        flags["refine_blocks"] = refiner.blocks
    mesh = None
    try:
        mesh = marching_cubes(
            lambda x: tp.query(x)[0], resolution=cfg.eval.mesh_resolution
        )
    except EmptySurfaceError:
        flags["empty_surface"] = True
    return est_cams, bundles, tp, mesh, flags


def cmd_infer(dataset_dir, fits_dir, net_dir, cfg: PipelineConfig, out_dir,
              oracle: bool = False) -> dict:
    """Run the joint loop over every scene of a dataset split."""
    out_dir = Path(out_dir)
    _echo_config(cfg, out_dir)
    data = ds.open_dataset(dataset_dir)
    net = None
    if not oracle and cfg.ablation != "no_ray_diffuser":
        if net_dir is None:
            raise ConfigError("cmd_infer needs a denoiser checkpoint (or oracle mode)")
        net = load_denoiser(net_dir)
    rows = []
    for i, name in enumerate(data.scene_names):
        scene = data.load_scene(name)
        scene_fit = Path(fits_dir) / name
        tp = load_triplane(scene_fit)
        supervision = (
            load_array(scene_fit / "supervision_points.arr"),
            load_array(scene_fit / "supervision_targets.arr"),
        )
        rng = np.random.default_rng([cfg.seed, 3000, i])
        est_cams, bundles, tp, mesh, flags = infer_scene(
            scene, tp, supervision, net, cfg, rng, oracle=oracle
        )
        scene_out = out_dir / name
        scene_out.mkdir(parents=True, exist_ok=True)
        if est_cams is not None:
            cams_payload = [
                {
                    "rotation": [float(x) for x in np.asarray(c.rotation).reshape(9)],
                    "center": [float(x) for x in c.center],
                    "intrinsics": [float(c.fx), float(c.fy), float(c.cx), float(c.cy)],
                }
                for c in est_cams
            ]
            reports.write_json(cams_payload, scene_out / "cameras.json")
        if bundles is not None:
            save_array(
                scene_out / "bundles.arr",
                np.stack([bundle_to_flat(b) for b in bundles]),
            )
        save_triplane(scene_out / "triplane", tp)
        if mesh is not None:
            save_obj(mesh, scene_out / "mesh.obj")
        reports.write_json(flags, scene_out / "flags.json")
        rows.append({"scene": name, **{k: int(v) for k, v in flags.items()}})
    reports.write_csv(rows, out_dir / "infer_summary.csv")
    return {"scenes": len(rows)}


def cmd_eval(run_dir, dataset_dir, cfg: PipelineConfig, out_dir) -> dict:
    """Score a run directory against its dataset's ground truth."""
    from .mesh import load_obj

    out_dir = Path(out_dir)
    _echo_config(cfg, out_dir)
    run_dir = Path(run_dir)
    data = ds.open_dataset(dataset_dir)
    rows = []
    missing = []
    rot_errors = []
    cds = []
    for i, name in enumerate(data.scene_names):
        scene = data.load_scene(name)
        scene_run = run_dir / name
        if not scene_run.exists():
            missing.append(name)
            continue
        row = {"scene": name, "n_views": len(scene.cameras)}
        cam_file = scene_run / "cameras.json"
        if cam_file.exists():
            payload = json.loads(cam_file.read_text())
            est = [
                type(scene.cameras[0])(
                    fx=p["intrinsics"][0],
                    fy=p["intrinsics"][1],
                    cx=p["intrinsics"][2],
                    cy=p["intrinsics"][3],
                    width=scene.cameras[j].width,
                    height=scene.cameras[j].height,
                    rotation=np.array(p["rotation"]).reshape(3, 3),
                    center=np.array(p["center"]),
                )
                for j, p in enumerate(payload)
            ]
            acc, errs = rotation_accuracy(
                est, scene.cameras, threshold_deg=cfg.eval.rotation_threshold_deg
            )
            tacc, terrs, fallback = translation_accuracy(
                est, scene.cameras, threshold=cfg.eval.translation_threshold
            )
            row["rotation_accuracy"] = acc
            row["translation_accuracy"] = tacc
            row["translation_fallback"] = int(fallback)
            rot_errors.extend(np.atleast_1d(errs))
        mesh_file = scene_run / "mesh.obj"
        if mesh_file.exists():
            pred = load_obj(mesh_file)
            rng = np.random.default_rng([cfg.seed, 4000, i])
            gt_mesh = marching_cubes(
                lambda x: scene.shape.sdf(x), resolution=cfg.eval.mesh_resolution
            )
            sm = surface_metrics(
                pred, gt_mesh, n=cfg.eval.surface_samples, rng=rng
            )
            row.update(cd=sm.cd, hd=sm.hd, nc=sm.nc, f_score=sm.f_score)
            cds.append(sm.cd)
        rows.append(row)

    # aggregate as a whole and per view count (Table-1-style grouping)
    def _agg(subset, label):
        out = {"scene": label, "n_views": ""}
        for key in ("rotation_accuracy", "translation_accuracy", "cd", "hd", "nc", "f_score"):
            vals = [r[key] for r in subset if key in r]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    aggregates = []
    for nv in sorted({r["n_views"] for r in rows}):
        aggregates.append(_agg([r for r in rows if r["n_views"] == nv], f"mean_views_{nv}"))
        aggregates[-1]["n_views"] = nv
    overall = _agg(rows, "mean_all")
    fieldnames = [
        "scene", "n_views", "rotation_accuracy", "translation_accuracy",
        "translation_fallback", "cd", "hd", "nc", "f_score",
    ]
    reports.write_csv(rows + aggregates + [overall], out_dir / "per_scene.csv", fieldnames)
    reports.write_json(
        {"scenes": rows, "per_views": aggregates, "overall": overall, "missing": missing},
        out_dir / "report.json",
    )
    if rot_errors:
        reports.error_histogram_figure(
            rot_errors,
            out_dir / "rotation_errors.png",
            threshold=cfg.eval.rotation_threshold_deg,
            title="pairwise relative rotation errors",
            xlabel="degrees",
        )
    if cds:
        reports.error_histogram_figure(
            cds, out_dir / "chamfer.png", title="per-scene Chamfer distance",
            xlabel="CD (scene units)",
        )
    if any("rotation_accuracy" in r for r in aggregates):
        reports.grouped_bar_figure(
            {r["n_views"]: r.get("rotation_accuracy", 0.0) for r in aggregates},
            out_dir / "rotation_accuracy_by_views.png",
            title="rotation accuracy @15° by view count",
            ylabel="fraction of pairs",
        )
    return {"scenes": len(rows), "missing": missing, "overall": overall}


def cmd_gradcheck(cfg: PipelineConfig = None) -> dict:
    """Central-difference checks over every differentiable component."""
    from .triplane import TriplaneSDF

    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(0)
    suites = {}

    tp = TriplaneSDF(resolution=8, channels=4, decoder_hidden=(16,), rng=rng)
    x = rng.uniform(-0.9, 0.9, size=(12, 3))
    target = rng.normal(size=12)

    def tp_fn(params):
        tp.set_params(params)
        s, cache = tp.query(x)
        err = s - target
        loss = float(np.mean(err**2))
        pg, dg, _ = tp.query_backward(cache, 2 * err / len(err))
        return loss, [pg] + dg

    suites["triplane_query"] = grad_check(tp_fn, tp.params)

    def surf_fn(params):
        tp.set_params(params)
        loss, grads, _ = on_surface_loss(tp, x)
        return loss, grads

    suites["on_surface_params"] = grad_check(surf_fn, tp.params)

    def surf_x_fn(params):
        loss, _, gx = on_surface_loss(tp, params[0])
        return loss, [gx]

    suites["on_surface_endpoints"] = grad_check(surf_x_fn, [x.copy()])

    net = DenoiserNet(feature_dim=6, hidden=12, rng=rng)
    for W in net.head.weights:
        W += rng.normal(0, 0.1, W.shape)
    Rt = rng.standard_normal((8, 7))
    feats = rng.standard_normal((8, 6))
    eps = rng.standard_normal((8, 7))
    from .diffusion import Conditioning

    cond = Conditioning(rng.standard_normal(8), feats, np.zeros(8, bool))

    def net_fn(params):
        net.set_params(params)
        eps_hat, cache = net.forward(Rt, 3, 10, cond, n_images=2)
        loss, grad = diffusion_loss(eps_hat, eps)
        return loss, net.backward(cache, grad)

    suites["denoiser_loss"] = grad_check(net_fn, net.params)

    result = {
        name: {
            "max_rel_error": float(rep.max_rel_error),
            "worst_param": int(rep.worst_param),
            "worst_index": [int(i) for i in rep.worst_index],
        }
        for name, rep in suites.items()
    }
    result["ok"] = all(rep.max_rel_error < 1e-4 for rep in suites.values())
    return result
