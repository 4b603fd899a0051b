"""Self-training orchestration: store construction, the training loop,
oracle-driven refinement simulation, evaluation, and pseudo-size audits.

The loop per optimizer step: forward -> per-image losses -> refinement of
that step's images (gated on posterior > prior, from the same forward
pass) -> backward -> Adam step. Refined sizes only change the supervision
the *next* time an image is rendered. Training reads points and images
only; ground-truth boxes, even if present in the annotation file, never
reach this code path.
"""

import json
import os
from dataclasses import MISSING, dataclass, field, fields, replace

import numpy as np
from scipy.ndimage import zoom

from .decode import DecodeConfig, count_from_detections, decode_detections, \
    extract_peaks, multiscale_merge
from .detector import DetectorParams, OptimizerState, forward, backward, step, \
    save_checkpoint, load_checkpoint
from .errors import ConfigError, DivergedLoss, NoGroundTruth, NoPositives
from .geometry import Box
from .losses import LossConfig, combined_loss, crowdedness_size_loss, \
    focal_center_loss, offset_loss
from .metrics import MetricsReport, counting_errors, detection_ap, \
    localization_ap_mle, localization_match, nwpu_prf, threshold_search
from .pseudosize import LudaConfig, generate_pseudo_boxes
from .raster import GaussianSpec, render_supervision, scatter_to_grid, \
    values_at_positives
from .refinement import BUCKET_LABELS, PseudoBoxStore
from .synth import PointScene, load_annotations, split_scenes


# ----------------------------------------------------------------------
# oracle detector: closed-form posterior growth for refinement studies

@dataclass(frozen=True)
class OracleConfig:
    p_inf: float = 0.95          # posterior asymptote
    tau_base: float = 3.0        # epochs to approach it, at crowdedness 1
    tau_crowd_scale: float = 1.0  # how much extra tau per unit crowdedness
    tau_jitter: float = 0.25     # lognormal spread of per-box tau
    size_tau: float = 10.0       # decay constant of the size noise
    size_noise: float = 0.3      # initial relative size error
    seed: int = 0


class OracleModel:
    """Stand-in detector with per-box posterior p_t = p_inf * (1 - exp(-t / tau)).

    tau grows with crowdedness, so sparse boxes become confident first --
    the qualitative behavior the refinement scheme relies on. Predicted
    sizes converge to per-box targets as the noise term decays.
    """

    def __init__(self, store: PseudoBoxStore, cfg: OracleConfig,
                 target_sizes: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._tau = {}
        self._eps = {}
        self._target = {}
        for image_id, rec in store.images.items():
            crowd = rec.crowdedness.astype(np.float64)
            tau = cfg.tau_base * (1.0 + cfg.tau_crowd_scale * (crowd - 1.0))
            if cfg.tau_jitter > 0:
                tau = tau * np.exp(rng.normal(0.0, cfg.tau_jitter, size=len(crowd)))
            self._tau[image_id] = tau
            self._eps[image_id] = rng.normal(0.0, cfg.size_noise, size=len(crowd))
            if target_sizes is not None:
                self._target[image_id] = np.asarray(target_sizes[image_id], dtype=np.float64)
            else:
                self._target[image_id] = rec.sizes.copy()

    def posteriors(self, image_id: str, t: int) -> np.ndarray:
        tau = self._tau[image_id]
        with np.errstate(divide="ignore"):
            decay = np.where(tau > 0, np.exp(-t / np.maximum(tau, 1e-12)), 0.0)
        return self.cfg.p_inf * (1.0 - decay)

    def sizes(self, image_id: str, t: int) -> np.ndarray:
        noise = self._eps[image_id] * np.exp(-t / max(self.cfg.size_tau, 1e-12))
        return np.maximum(self._target[image_id] * (1.0 + noise), 1e-3)


@dataclass
class SimulationResult:
    trajectory: list[dict]            # per epoch: bucket label -> fraction
    first_crossing: dict              # bucket label -> first epoch fraction > level, or None
    final: dict                       # last epoch's fractions


def simulate_refinement(oracle: OracleModel, store: PseudoBoxStore, epochs: int,
                        threshold: float = 0.6,
                        crossing_level: float = 0.5) -> SimulationResult:
    """Run the refinement gate against the oracle and track bucket fractions."""
    trajectory = []
    first = {label: None for label in BUCKET_LABELS}
    for t in range(1, epochs + 1):
        store.epoch = t
        for image_id in store.images:
            store.refine(image_id, oracle.sizes(image_id, t),
                         oracle.posteriors(image_id, t))
        stats = store.bucket_stats(threshold)
        trajectory.append(stats)
        for label, frac in stats.items():
            if first[label] is None and frac > crossing_level:
                first[label] = t
    return SimulationResult(trajectory, first, trajectory[-1] if trajectory else {})


# ----------------------------------------------------------------------
# run configuration

_DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class RunConfig:
    annotations: str = ""
    images_dir: str | None = None
    out_dir: str = "run"
    stride: int = 1
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 7.5e-4
    dtype: str = "float64"          # float32 halves training time
    detector_mode: str = "toy"      # "toy" | "oracle"
    refinement: bool = True
    crowdedness_loss: bool = True
    initial_prior: float = 0.6
    eval_floor: float = 0.05
    count_threshold: float = 0.4
    threshold_grid: tuple = _DEFAULT_GRID
    split: tuple = (0.8, 0.1, 0.1)
    luda: LudaConfig = field(default_factory=LudaConfig)
    loss: LossConfig | None = None  # None -> LossConfig.for_stride(stride)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    gaussian: GaussianSpec = field(default_factory=GaussianSpec)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def loss_config(self) -> LossConfig:
        return self.loss if self.loss is not None else LossConfig.for_stride(self.stride)

    def validate(self) -> None:
        if self.stride not in (1, 4):
            raise ConfigError("stride must be 1 or 4")
        if self.detector_mode not in ("toy", "oracle"):
            raise ConfigError(f"unknown detector_mode {self.detector_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.initial_prior <= 1.0):
            raise ConfigError("initial_prior must be a probability")


_NESTED = {"luda": LudaConfig, "loss": LossConfig, "decode": DecodeConfig,
           "gaussian": GaussianSpec, "oracle": OracleConfig}


def _coerce(kind, text):
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


def _field_types(cls):
    out = {}
    for f in fields(cls):
        if f.name in ("scales", "threshold_grid", "split"):
            out[f.name] = tuple
        elif f.name in _NESTED:
            out[f.name] = None  # only settable through "section.key"
        elif f.default is MISSING or f.default is None:
            out[f.name] = str
        else:
            out[f.name] = type(f.default)
    return out


def apply_kv(config: RunConfig, kv: dict) -> RunConfig:
    """Overlay flat ``section.key=value`` strings onto a RunConfig."""
    top_types = _field_types(RunConfig)
    updates = {}
    nested_updates: dict[str, dict] = {}
    for key, text in kv.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _NESTED:
                raise ConfigError(f"unknown config section {section!r}")
            sub_types = _field_types(_NESTED[section])
            if name not in sub_types:
                raise ConfigError(f"unknown key {key!r}")
            nested_updates.setdefault(section, {})[name] = _coerce(sub_types[name], str(text))
        else:
            if key not in top_types:
                raise ConfigError(f"unknown key {key!r}")
            if top_types[key] is None:
                raise ConfigError(f"{key!r} is a section; set {key}.<field> instead")
            updates[key] = _coerce(top_types[key], str(text))
    config = replace(config, **updates)
    for section, sub in nested_updates.items():
        base = getattr(config, section)
        if base is None:
            base = _NESTED[section].for_stride(config.stride) \
                if section == "loss" else _NESTED[section]()
        config = replace(config, **{section: replace(base, **sub)})
    return config


def parse_config_file(path) -> dict:
    """Line-oriented key=value file; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ----------------------------------------------------------------------
# store construction and the training loop

def build_store(scenes, luda_cfg: LudaConfig, initial_prior: float = 0.6) -> PseudoBoxStore:
    """Initial pseudo boxes for every scene, from points only."""
    return PseudoBoxStore.from_pseudo_boxes({
        s.image_id: generate_pseudo_boxes(s.points, s.width, s.height,
                                          luda_cfg, initial_prior)
        for s in scenes})


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _config_fingerprint(config: RunConfig) -> dict:
    """Config as a plain dict, minus filesystem paths (stable across hosts)."""
    d = {}
    for f in fields(RunConfig):
        if f.name in ("annotations", "images_dir", "out_dir"):
            continue
        v = getattr(config, f.name)
        if hasattr(v, "__dataclass_fields__"):
            v = {g.name: getattr(v, g.name) for g in fields(v)}
        d[f.name] = v
    if d.get("loss") is None:
        lc = config.loss_config()
        d["loss"] = {g.name: getattr(lc, g.name) for g in fields(lc)}
    return d


def train(config: RunConfig, resume: bool = False) -> dict:
    """Run the self-training loop; returns a summary with artifact paths.

    Training consumes points and images only. Scenes are split
    train/val/test by position; the validation slice feeds the final
    counting-threshold search, the test slice is untouched.
    """
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_path = os.path.join(config.out_dir, "checkpoint.bin")
    store_path = os.path.join(config.out_dir, "store.txt")
    log_path = os.path.join(config.out_dir, "log.json")

    toy = config.detector_mode == "toy"
    scenes = load_annotations(config.annotations, images_dir=config.images_dir,
                              load_images=toy)
    train_scenes, val_scenes, _ = split_scenes(scenes, config.split)
    # point-only supervision, enforced: boxes never cross this line
    train_scenes = [s.without_boxes() for s in train_scenes]
    val_scenes = [s.without_boxes() for s in val_scenes]
    if not train_scenes:
        raise ConfigError("no training scenes")
    if toy:
        shapes = {(s.height, s.width) for s in train_scenes}
        if len(shapes) != 1:
            raise ConfigError(f"training scenes must share one shape, got {shapes}")

    losscfg = config.loss_config()
    start_epoch = 0
    params = opt = None
    if resume:
        if not toy:
            raise ConfigError("resume is only supported for the toy detector")
        if not os.path.exists(store_path):
            raise ConfigError(f"cannot resume: {store_path} missing")
        store = PseudoBoxStore.load(store_path)
        start_epoch = store.epoch
        rng = np.random.default_rng(config.seed)
        if toy:
            params, opt, header = load_checkpoint(ckpt_path)
            start_epoch = header["epoch"]
            if header["rng_state"] is not None:
                state = dict(header["rng_state"])
                state["state"] = {k: int(v) for k, v in state["state"].items()}
                rng.bit_generator.state = state
        with open(log_path, "r", encoding="utf-8") as f:
            log = json.load(f)
    else:
        store = build_store(train_scenes, config.luda, config.initial_prior)
        rng = np.random.default_rng(config.seed)
        if toy:
            params = DetectorParams.init(config.seed, config.stride,
                                         dtype=np.dtype(config.dtype))
            opt = OptimizerState.for_params(params, lr=config.lr)
        log = {"config": _config_fingerprint(config), "epochs": []}

    oracle = OracleModel(store, config.oracle) if not toy else None

    for epoch in range(start_epoch + 1, config.epochs + 1):
        store.epoch = epoch
        refined = 0
        losses = []
        if toy:
            order = rng.permutation(len(train_scenes))
            for batch_idx in _chunks(order, config.batch_size):
                batch = [train_scenes[i] for i in batch_idx]
                refined_b, batch_losses = _train_batch(
                    params, opt, store, batch, config, losscfg)
                refined += refined_b
                losses.extend(batch_losses)
        else:
            for image_id in store.images:
                refined += store.refine(image_id, oracle.sizes(image_id, epoch),
                                        oracle.posteriors(image_id, epoch))
        entry = {"epoch": epoch,
                 "mean_loss": float(np.mean(losses)) if losses else None,
                 "refined": refined,
                 "bucket_stats": store.bucket_stats(config.initial_prior)}
        log["epochs"].append(entry)
        store.save(store_path)
        if toy:
            save_checkpoint(ckpt_path, params, opt, epoch=epoch,
                            rng_state=rng.bit_generator.state)

    best_threshold = None
    if toy and val_scenes:
        scores = [np.array([b.score for b in detect_scene(params, s.image, config)])
                  for s in val_scenes]
        best_threshold = threshold_search(scores, [s.count for s in val_scenes],
                                          config.threshold_grid)
        save_checkpoint(ckpt_path, params, opt, epoch=config.epochs,
                        rng_state=rng.bit_generator.state,
                        extra={"best_threshold": best_threshold})
    log["best_threshold"] = best_threshold
    with open(log_path, "w", encoding="utf-8") as f:
        json.dump(log, f, sort_keys=True, indent=1)
        f.write("\n")
    return {"checkpoint": ckpt_path if toy else None, "store": store_path,
            "log": log_path, "best_threshold": best_threshold,
            "epochs_run": config.epochs - start_epoch}


def _train_batch(params, opt, store, batch, config, losscfg):
    imgs = np.stack([s.image for s in batch])
    pred, cache = forward(params, imgs)
    dheat = np.zeros_like(pred.heatmap)
    dsize = np.zeros_like(pred.size_map)
    doff = np.zeros_like(pred.offset_map) if pred.offset_map is not None else None
    losses = []
    refined = 0
    for bi, scene in enumerate(batch):
        rec = store.images[scene.image_id]
        maps = render_supervision(rec.points, rec.sizes, scene.height,
                                  scene.width, config.stride, config.gaussian)
        h, w = maps.heatmap.shape
        try:
            lc = focal_center_loss(pred.heatmap[bi], maps.heatmap,
                                   maps.pos_mask, losscfg)
        except NoPositives:
            continue
        if config.crowdedness_loss:
            alphas = values_at_positives(
                scatter_to_grid(rec.alphas, maps.center_cells, h, w, fill=1.0),
                maps.pos_mask)
        else:
            alphas = 1.0
        ls = crowdedness_size_loss(pred.size_map[bi], maps.size_map,
                                   maps.pos_mask, alphas)
        lo = None
        if config.stride == 4:
            lo = offset_loss(pred.offset_map[bi], maps.offset_map, maps.pos_mask)
        total = combined_loss(lc.value, ls.value,
                              None if lo is None else lo.value, losscfg)
        if not np.isfinite(total):
            raise DivergedLoss(
                f"non-finite loss on {scene.image_id} at epoch {store.epoch}"
                f" (center {lc.value}, size {ls.value})")
        losses.append(total)
        dheat[bi] = losscfg.lam * lc.gradient
        dsize[bi] = ls.gradient
        if lo is not None:
            doff[bi] = lo.gradient
        if config.refinement:
            cells = maps.center_cells
            post = pred.heatmap[bi][cells[:, 0], cells[:, 1]]
            sz = np.exp(pred.size_map[bi][cells[:, 0], cells[:, 1]])
            refined += store.refine(scene.image_id, sz, post)
    if losses:
        n = len(losses)
        dheat /= n
        dsize /= n
        if doff is not None:
            doff /= n
        grads = backward(params, cache, dheat, dsize, doff)
        step(params, grads, opt)
    return refined, losses


# ----------------------------------------------------------------------
# inference and evaluation

def detect_scene(params: DetectorParams, image: np.ndarray, config: RunConfig,
                 floor: float | None = None) -> list[Box]:
    """Multi-scale detection for one image, merged by global NMS.

    Peaks are extracted down to ``floor`` (default config.eval_floor) so
    ranking metrics see the full curve; counting applies its own threshold
    afterwards.
    """
    floor = config.eval_floor if floor is None else floor
    per_scale = []
    used = []
    for s in config.decode.scales:
        scaled = image if s == 1.0 else zoom(np.asarray(image, dtype=np.float64),
                                             s, order=1)
        h, w = scaled.shape
        if params.stride == 4:
            scaled = scaled[:h // 4 * 4, :w // 4 * 4]
            h, w = scaled.shape
        if h < 8 or w < 8:
            continue
        pred, _ = forward(params, scaled)
        peaks = extract_peaks(pred.heatmap, threshold=floor,
                              window=config.decode.peak_window)
        per_scale.append(decode_detections(peaks, pred.size_map,
                                           pred.offset_map, params.stride))
        used.append(s)
    return multiscale_merge(per_scale, used, config.decode.nms_iou)


def evaluate(params: DetectorParams, scenes: list[PointScene], config: RunConfig,
             count_threshold: float | None = None) -> MetricsReport:
    """Full metrics over scenes: detection AP (if boxes exist), counting,
    localization AP/MLE, and radius-based precision/recall/F1.

    F1-family metrics use detections at the counting threshold (an
    operating point); AP-family metrics use everything down to the decode
    floor.
    """
    if not scenes or all(len(s.points) == 0 for s in scenes):
        raise NoGroundTruth("nothing to evaluate against")
    threshold = config.count_threshold if count_threshold is None else count_threshold
    all_dets = [detect_scene(params, s.image, config) for s in scenes]
    report = MetricsReport(n_images=len(scenes), count_threshold=threshold)

    have_boxes = all(s.gt_boxes is not None for s in scenes)
    if have_boxes:
        gts = [s.gt_boxes for s in scenes]
        for thr in (0.3, 0.5, 0.7):
            ap, curve = detection_ap(all_dets, gts, thr)
            report.ap_by_iou[thr] = ap
            report.pr_curves[thr] = curve
        strong = [[b for b in dets if b.score >= threshold] for dets in all_dets]
        p, r, f1 = nwpu_prf(
            [(np.array([[b.cx, b.cy] for b in dets]).reshape(-1, 2),
              np.array([b.score for b in dets])) for dets in strong], gts)
        report.precision, report.recall, report.f1 = p, r, f1

    counts = [count_from_detections(d, threshold) for d in all_dets]
    report.mae, report.rmse, report.nae = counting_errors(
        counts, [s.count for s in scenes])

    matches = []
    scores = []
    for dets, scene in zip(all_dets, scenes):
        pts = np.array([[b.cx, b.cy] for b in dets]).reshape(-1, 2)
        matches.append(localization_match(pts, scene.points))
        scores.append(np.array([b.score for b in dets]))
    report.loc_ap, report.mle = localization_ap_mle(
        matches, scores, [s.count for s in scenes])
    return report


def write_report(report: MetricsReport, out_dir) -> tuple[str, str]:
    """Persist a report as text and JSON; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    txt = os.path.join(out_dir, "report.txt")
    js = os.path.join(out_dir, "report.json")
    with open(txt, "w", encoding="utf-8") as f:
        f.write(report.to_text())
    with open(js, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    return txt, js


def audit_pseudo_sizes(scenes: list[PointScene], luda_cfg: LudaConfig,
                       initial_prior: float = 0.6,
                       refined_store: PseudoBoxStore | None = None,
                       iou_thresholds=(0.3, 0.5, 0.7)) -> dict:
    """AP of pseudo boxes against ground truth: GAK, smoothed, and refined.

    Pseudo boxes score by their prior, so a refined store also benefits
    from its confidence ranking, mirroring how it would be consumed.
    """
    if any(s.gt_boxes is None for s in scenes):
        raise NoGroundTruth("pseudo-size audit needs ground-truth boxes")
    gts = [s.gt_boxes for s in scenes]

    def store_ap(store):
        dets = []
        for s in scenes:
            rec = store.images[s.image_id]
            dets.append(np.column_stack([rec.points, rec.sizes, rec.priors]))
        return {thr: detection_ap(dets, gts, thr)[0] for thr in iou_thresholds}

    rows = {}
    rows["gak"] = store_ap(build_store(scenes, replace(luda_cfg, gak_mode=True),
                                       initial_prior))
    rows["luda"] = store_ap(build_store(scenes, replace(luda_cfg, gak_mode=False),
                                        initial_prior))
    if refined_store is not None:
        rows["refined"] = store_ap(refined_store)
    return rows


def draw_overlay(image: np.ndarray, boxes: list[Box]) -> np.ndarray:
    """Copy of the image with 1-px box outlines burned in at intensity 1."""
    img = np.asarray(image, dtype=np.float64).copy()
    h, w = img.shape
    for b in boxes:
        x0, y0, x1, y1 = (int(round(v)) for v in b.corners)
        x0, x1 = max(x0, 0), min(x1, w - 1)
        y0, y1 = max(y0, 0), min(y1, h - 1)
        img[y0, x0:x1 + 1] = 1.0
        img[y1, x0:x1 + 1] = 1.0
        img[y0:y1 + 1, x0] = 1.0
        img[y0:y1 + 1, x1] = 1.0
    return img
