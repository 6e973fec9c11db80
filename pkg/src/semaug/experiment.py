"""Three-phase protocol: pretrain on the general domain, adapt to the vertical
domain, train routers, then evaluate every arm on both domains."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_model, save_router
from .config import Config
from .data import Dataset, DomainSpec, general_domain, load_dataset, make_dataset, vertical_domain, write_dataset
from .detector import AdapterSet, OpenVocabDetector, PromptAugmentedDetector, predict_arm
from .metrics import calibrate_tau, harmonic_mean, mean_average_precision, overlap_coefficient, routing_accuracy
from .router import DDASRouter, SemanticAwareRouter

log = logging.getLogger("semaug")

DOMAINS = ("general", "vertical")
SPLITS = ("train", "eval", "calib")
ARMS = ("zero_shot", "peft", "peft_sar", "peft_ddas")
LOSS_COLUMNS = ("total", "l_cls", "l_box", "l_giou", "l_m", "l_p")


class PhaseError(RuntimeError):
    """A protocol phase failed; ``phase`` names it."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


class _phase:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("phase %s: start", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PhaseError):
            raise PhaseError(self.name, exc) from exc
        log.info("phase %s: %.1fs", self.name, time.perf_counter() - self.t0)
        return False


# -- config -> objects ------------------------------------------------------------


def domain_specs(cfg: Config) -> tuple[DomainSpec, DomainSpec]:
    specs = []
    for name, factory in (("general", general_domain), ("vertical", vertical_domain)):
        d = getattr(cfg.data, name)
        specs.append(factory(
            bg_hue=d.bg_hue, bg_hue_jitter=d.bg_hue_jitter, bg_saturation=d.bg_saturation,
            bg_value=d.bg_value, palette=tuple(d.palette), obj_saturation=d.obj_saturation,
            obj_value=d.obj_value, noise=d.noise, gain_range=(d.gain_min, d.gain_max),
            objects_per_image=(d.objects_min, d.objects_max), size_range=(d.size_min, d.size_max),
            image_size=(cfg.data.image_size, cfg.data.image_size)))
    return specs[0], specs[1]


def split_sizes(cfg: Config) -> dict[str, int]:
    return {"train": cfg.data.n_train, "eval": cfg.data.n_eval, "calib": cfg.data.n_calib}


def build_datasets(cfg: Config) -> dict[tuple[str, str], Dataset]:
    general, vertical = domain_specs(cfg)
    sizes = split_sizes(cfg)
    return {(spec.name, split): make_dataset(spec, sizes[split], cfg.seed, split)
            for spec in (general, vertical) for split in SPLITS}


def write_datasets(datasets: dict[tuple[str, str], Dataset], root: str | Path) -> None:
    for (domain, split), ds in sorted(datasets.items()):
        write_dataset(ds, Path(root) / domain / split)


def read_datasets(root: str | Path) -> dict[tuple[str, str], Dataset]:
    root = Path(root)
    out = {}
    for domain in DOMAINS:
        for split in SPLITS:
            path = root / domain / split
            if not (path / "manifest.json").exists():
                raise FileNotFoundError(f"dataset {path} missing; run gen-data first")
            out[(domain, split)] = load_dataset(path)
    return out


def make_base(cfg: Config, datasets) -> OpenVocabDetector:
    m, t, w = cfg.model, cfg.train, cfg.loss
    gen, vert = datasets[("general", "train")], datasets[("vertical", "train")]
    return OpenVocabDetector(
        vocabulary=tuple(gen.categories) + tuple(vert.categories),
        token_parents=vert.fine_to_coarse, fine_token_noise=m.fine_token_noise, dim=m.D,
        n_stages=m.S, n_queries=m.Q, head_hidden=m.head_hidden, head_layers=m.head_layers,
        max_text_len=m.max_text_len, attn_radius=m.attn_radius, epochs=t.pretrain_epochs,
        batch_size=t.batch_size, lr=t.pretrain_lr, weight_decay=t.weight_decay,
        w_cls=w.w_cls, w_box=w.w_box, w_giou=w.w_giou, focal_alpha=w.focal_alpha,
        focal_gamma=w.focal_gamma, augment=t.augment, context_augment=t.context_augment,
        n_negative_tokens=t.negative_tokens, shift=t.shift, random_state=cfg.seed)


def make_peft(cfg: Config, base) -> PromptAugmentedDetector:
    m, t, w = cfg.model, cfg.train, cfg.loss
    return PromptAugmentedDetector(
        base=base, n_prompts=m.N, prompt_len=m.M, n_select=m.S, lora_rank=m.lora_rank,
        lora_alpha=m.lora_alpha, lambda_m=w.lambda_m, lambda_p=w.lambda_p,
        epochs=t.peft_epochs, batch_size=t.batch_size, lr=t.peft_lr,
        weight_decay=t.weight_decay, augment=t.peft_augment, shift=t.peft_shift,
        random_state=cfg.seed)


def make_router(cfg: Config, kind: str):
    r = cfg.router
    cls = SemanticAwareRouter if kind == "sar" else DDASRouter
    return cls(tau=r.tau, epsilon=r.epsilon, feature_dim=r.feature_dim,
               extractor_channels=r.extractor_channels, epochs=r.epochs, lr=r.lr,
               batch_size=r.batch_size, random_state=cfg.seed)


# -- phases ---------------------------------------------------------------------------


def pretrain(cfg: Config, datasets) -> OpenVocabDetector:
    ds = datasets[("general", "train")]
    det = make_base(cfg, datasets)
    det.fit(ds.images, ds.annotations, ds.categories)
    return det


def peft_finetune(cfg: Config, base: OpenVocabDetector, datasets) -> PromptAugmentedDetector:
    ds = datasets[("vertical", "train")]
    return make_peft(cfg, base).fit(ds.images, ds.annotations, ds.categories)


def train_routers(cfg: Config, datasets) -> dict[str, SemanticAwareRouter]:
    X = datasets[("vertical", "train")].images
    routers = {}
    for kind in ("sar", "ddas"):
        router = make_router(cfg, kind)
        # both routers share the frozen extractor, so features are computed once
        feats = router._extractor().pooled(X)
        routers[kind] = router.fit(X, features=feats)
    return routers


def calibrate_routers(cfg: Config, routers, datasets) -> dict[str, float]:
    """Select tau per router on the calibration splits (or keep the configured one)."""
    taus = {}
    for kind, router in routers.items():
        if cfg.router.calibrate:
            e_in = router.score_samples(datasets[("vertical", "calib")].images)
            e_out = router.score_samples(datasets[("general", "calib")].images)
            tau = calibrate_tau(e_in, e_out)
            if tau <= 0:
                tau = float(np.nextafter(0.0, 1.0))
            router.set_params(tau=tau)
        taus[kind] = float(router.tau)
    return taus


@dataclass
class ArmPredictions:
    """Per-image predictions of the two base arms, reused by every routed arm."""
    pretrained: list
    augmented: list | None


def predict_both(model, adapters: AdapterSet | None, ds: Dataset) -> ArmPredictions:
    pre = predict_arm(model, None, ds.images, ds.categories, "pretrained")
    aug = (predict_arm(model, adapters, ds.images, ds.categories, "augmented")
           if adapters is not None else None)
    return ArmPredictions(pre, aug)


def routed(preds: ArmPredictions, decisions: np.ndarray) -> list:
    return [a if d else p for p, a, d in zip(preds.pretrained, preds.augmented, decisions)]


def dataset_map(preds, ds: Dataset) -> float:
    return mean_average_precision(preds, ds.annotations, len(ds.categories))


# -- outputs --------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def loss_curves_csv(curves: dict[str, list[dict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "phase") + LOSS_COLUMNS)
    for phase, rows in curves.items():
        for epoch, row in enumerate(rows):
            w.writerow([epoch, phase] + [_fmt(row.get(c)) for c in LOSS_COLUMNS])
    return buf.getvalue()


def router_errors_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample_id", "domain", "d_err_sar", "d_err_ddas", "decision"))
    for sid, domain, e_sar, e_ddas, decision in rows:
        w.writerow((sid, domain, _fmt(e_sar), _fmt(e_ddas), decision))
    return buf.getvalue()


def router_trace_csv(ids, domains, errors, tau: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample_id", "domain_label", "d_err", "decision"))
    for sid, dom, e in zip(ids, domains, errors):
        w.writerow((sid, dom, _fmt(e), "augmented" if e < tau else "pretrained"))
    return buf.getvalue()


def histogram_csv(errors: dict[str, tuple[np.ndarray, np.ndarray]], bins: int = 50) -> str:
    """Per router: bin edges over the combined range, in-domain and
    out-of-domain fractions per bin."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("router", "bin", "lo", "hi", "p_vertical", "p_general"))
    for kind, (e_in, e_out) in errors.items():
        both = np.concatenate([e_in, e_out])
        lo, hi = float(both.min()), float(both.max())
        edges = np.histogram_bin_edges(both, bins=bins, range=(lo, hi) if hi > lo else None)
        p = np.histogram(e_in, edges)[0] / len(e_in)
        q = np.histogram(e_out, edges)[0] / len(e_out)
        for b in range(len(edges) - 1):
            w.writerow((kind, b, _fmt(edges[b]), _fmt(edges[b + 1]), _fmt(p[b]), _fmt(q[b])))
    return buf.getvalue()


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- evaluation -------------------------------------------------------------------------


def evaluate(cfg: Config, model, adapters, routers, datasets, out: Path | None = None) -> dict:
    """mAP of every arm on both eval splits, routing diagnostics and traces."""
    g_ds, v_ds = datasets[("general", "eval")], datasets[("vertical", "eval")]
    preds = {"general": predict_both(model, adapters, g_ds),
             "vertical": predict_both(model, adapters, v_ds)}
    arms = {}
    errors = {}
    for kind, router in (routers or {}).items():
        errors[kind] = {d: router.score_samples(ds.images)
                        for d, ds in (("general", g_ds), ("vertical", v_ds))}
    for arm in ARMS:
        per_domain = {}
        for domain, ds in (("general", g_ds), ("vertical", v_ds)):
            p = preds[domain]
            if arm == "zero_shot":
                chosen = p.pretrained
            elif p.augmented is None:
                chosen = None
            elif arm == "peft":
                chosen = p.augmented
            else:
                kind = arm.split("_")[1]
                if kind not in errors:
                    chosen = None
                else:
                    chosen = routed(p, errors[kind][domain] < routers[kind].tau)
            per_domain[domain] = None if chosen is None else dataset_map(chosen, ds)
        if per_domain["general"] is None:
            continue
        arms[arm] = {"map_tgt": per_domain["vertical"], "map_general": per_domain["general"],
                     "h": harmonic_mean(per_domain["vertical"], per_domain["general"])}
    routing = {}
    for kind in errors:
        e_in, e_out = errors[kind]["vertical"], errors[kind]["general"]
        routing[kind] = {"tau": float(routers[kind].tau),
                         "accuracy": routing_accuracy(e_in, e_out, routers[kind].tau),
                         "overlap": overlap_coefficient(e_in, e_out)}
    result = {"arms": arms, "routing": routing, "errors": errors,
              "ids": {"general": list(g_ds.ids), "vertical": list(v_ds.ids)}}
    if out is not None and errors:
        write_traces(out, result, routers)
    return result


def write_traces(out: Path, result: dict, routers) -> None:
    out.mkdir(parents=True, exist_ok=True)
    errors, ids = result["errors"], result["ids"]
    rows = []
    for domain in ("vertical", "general"):
        sar = errors.get("sar", {}).get(domain)
        ddas = errors.get("ddas", {}).get(domain)
        for i, sid in enumerate(ids[domain]):
            e_sar = None if sar is None else sar[i]
            e_ddas = None if ddas is None else ddas[i]
            decision = ("" if sar is None else
                        "augmented" if e_sar < routers["sar"].tau else "pretrained")
            rows.append((sid, domain, e_sar, e_ddas, decision))
    (out / "router_errors.csv").write_text(router_errors_csv(rows))
    for kind in errors:
        e = np.concatenate([errors[kind]["vertical"], errors[kind]["general"]])
        sids = ids["vertical"] + ids["general"]
        doms = ["vertical"] * len(ids["vertical"]) + ["general"] * len(ids["general"])
        (out / f"router_trace_{kind}.csv").write_text(
            router_trace_csv(sids, doms, e, routers[kind].tau))


def build_report(cfg: Config, evaluation: dict, curve_files: dict[str, str]) -> dict:
    arms = evaluation["arms"]
    headline = arms.get("peft_sar") or arms.get("peft") or arms["zero_shot"]
    routing = evaluation["routing"]
    sar, ddas = routing.get("sar", {}), routing.get("ddas", {})
    return {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "map_tgt": headline["map_tgt"],
        "map_general": headline["map_general"],
        "h": headline["h"],
        "routing": {
            "tau": sar.get("tau"),
            "accuracy": sar.get("accuracy"),
            "overlap_sar": sar.get("overlap"),
            "overlap_ddas": ddas.get("overlap"),
            "tau_ddas": ddas.get("tau"),
            "accuracy_ddas": ddas.get("accuracy"),
        },
        "arms": arms,
        "curves": curve_files,
    }


def run_experiment(cfg: Config, out_dir: str | Path) -> dict:
    """Run every phase in memory and write report, traces and checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("resolved config:\n%s", cfg.to_json())
    with _phase("data"):
        datasets = build_datasets(cfg)
    with _phase("pretrain"):
        base = pretrain(cfg, datasets)
        model = base.model_
        base_hash = model.parameter_hash()
        save_model(out / "base.ckpt", model)
    with _phase("peft"):
        peft = peft_finetune(cfg, base, datasets)
        save_model(out / "peft.ckpt", model, peft.adapters_)
    with _phase("router"):
        routers = train_routers(cfg, datasets)
        calibrate_routers(cfg, routers, datasets)
        for kind, r in routers.items():
            save_router(out / f"router_{kind}.ckpt", r)
    if model.parameter_hash() != base_hash:
        raise PhaseError("router", RuntimeError("base parameters changed after adaptation"))
    with _phase("eval"):
        evaluation = evaluate(cfg, model, peft.adapters_, routers, datasets, out)
    curves = {"pretrain": base.loss_curve_, "peft": peft.loss_curve_}
    for kind, r in routers.items():
        curves[f"router_{kind}"] = [{"total": v} for v in r.loss_curve_]
    (out / "loss_curves.csv").write_text(loss_curves_csv(curves))
    files = {"loss": "loss_curves.csv", "router_errors": "router_errors.csv",
             "router_trace_sar": "router_trace_sar.csv",
             "router_trace_ddas": "router_trace_ddas.csv"}
    report = build_report(cfg, evaluation, files)
    report["base_hash"] = base_hash
    write_json(out / "report.json", report)
    return report
