"""Pipeline configuration and the stage functions behind the CLI.

Every stage reads artifacts from the output directory, writes its own
artifacts there, and records their sha256 digests in ``manifest.json``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import adapter, corridor, evalkit, fedsim, ingest, promptgen
from .errors import FedFlowError, InsufficientCandidatesError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class MissingPathError(FedFlowError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"required path does not exist: {path}")


class OutputExistsError(FedFlowError):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__(f"outputs already exist (use --force to overwrite): {', '.join(self.paths)}")


def _regime(base, amp, sensors, noise, drop=0.001, weekend=0.75, peaks=(8.0, 17.5), lanes=4, district="12",
            drift=0.08):
    return {"base_flow": base, "daily_amplitude": amp, "sensor_count": sensors, "noise_std": noise,
            "zero_dropout_prob": drop, "weekend_factor": weekend, "peak_hours": list(peaks), "lanes": lanes,
            "district": district, "drift_std": drift, "drift_corr": 0.95}


DEFAULT_CONFIG = {
    "seed": 3407,
    "data": {
        "synthetic": True,
        "flow_csv": None,
        "meta_csv": None,
        "days": 28,
        "start": "2019-01-07 00:00:00",
        "epsilon": 0.1,
        # corridor label -> regime; district 4 is the held-out region
        "regimes": {
            "I5-N": _regime(370, 260, 60, 9, lanes=5),
            "I5-S": _regime(365, 255, 58, 9, lanes=5, peaks=(7.5, 17.0)),
            "SR22-E": _regime(290, 200, 18, 7),
            "SR22-W": _regime(280, 195, 17, 7, peaks=(7.5, 17.0)),
            "SR55-N": _regime(300, 210, 21, 7),
            "SR55-S": _regime(295, 205, 20, 7, peaks=(7.5, 17.0)),
            "SR57-N": _regime(360, 240, 29, 8, peaks=(7.0, 16.5)),
            "SR57-S": _regime(350, 235, 28, 8, peaks=(7.5, 17.0)),
            "SR133-N": _regime(90, 70, 24, 2.5, drop=0.002, lanes=2, peaks=(6.5, 16.0)),
            "SR133-S": _regime(80, 60, 20, 2.5, drop=0.004, lanes=2, peaks=(7.0, 18.0)),
            "SR261-N": _regime(35, 30, 17, 1.2, drop=0.003, lanes=2, peaks=(6.5, 17.0)),
            "SR261-S": _regime(35, 28, 16, 1.2, drop=0.003, lanes=2, peaks=(7.0, 16.0)),
            "SR24-E": _regime(250, 180, 10, 6, district="4"),
            "SR24-W": _regime(245, 175, 10, 6, district="4", peaks=(7.5, 17.0)),
            "SR87-N": _regime(200, 150, 10, 5, district="4", lanes=3),
            "SR87-S": _regime(195, 145, 10, 5, district="4", lanes=3, peaks=(7.5, 17.0)),
        },
    },
    "split": {"train_start": "2019-01-07 00:00:00", "train_end": "2019-01-28 00:00:00",
              "test_end": "2019-02-04 00:00:00"},
    "select": {
        "features_csv": None,
        "district": "12",
        "css_weights": [0.25, 0.25, 0.25, 0.25],
        "k_range": [2, 7],
        "k_override": None,
        "n_init": 5,
        "domain_cluster": "SR55-N",
        "domain_max_sensors": 22,
        "band": [15, 40],
        "exclusions": [],
        "fed_k": 4,
    },
    "prompts": {
        "domain_samples": 2000,
        "client_train_samples": 500,
        "client_test_samples": 300,
        "zero_shot_samples": 600,
        "congestion_theta": 0.7,
        "activity_threshold": 0.1,
        "zero_floor": 0.25,
        "flat_tolerance": 1.0,
        "flat_slope": 1.0,
        "trend_tolerance": 5.0,
    },
    "model": {
        "hidden": [64, 64],
        "rank": 4,
        "alpha": 4.0,
        "pretrain": {"learning_rate": 3e-3, "weight_decay": 0.0, "warmup_steps": 100, "total_steps": 3000,
                     "effective_batch_size": 128, "w_cls": 0.005},
        "central": {"learning_rate": 2e-3, "weight_decay": 0.01, "warmup_steps": 50, "total_steps": 300,
                    "effective_batch_size": 16, "w_cls": 0.005},
    },
    "fed": {"rounds": 2, "local_steps": 200, "clients": None, "concurrent": False, "bytes_per_scalar": 4,
            "train": {"learning_rate": 1e-3, "weight_decay": 0.01, "warmup_steps": 50,
                      "effective_batch_size": 16, "w_cls": 0.005}},
    "eval": {"zero_shot_sizes": [100, 300, 600]},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "regimes":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingPathError(p)
        cfg = deep_merge(cfg, json.loads(p.read_text()))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    s = cfg["split"]
    t0, t1, t2 = (np.datetime64(s[k].replace(" ", "T"), "s") for k in ("train_start", "train_end", "test_end"))
    if not t0 < t1 < t2:
        raise ValueError("split boundaries must satisfy train_start < train_end < test_end")
    lo, hi = cfg["select"]["k_range"]
    if not 2 <= lo <= hi:
        raise ValueError("k_range must satisfy 2 <= lo <= hi")
    if cfg["fed"]["rounds"] < 1 or cfg["fed"]["local_steps"] < 0:
        raise ValueError("fed.rounds must be >= 1 and fed.local_steps >= 0")


# ---------------------------------------------------------------------------
# manifest helpers
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(out: Path) -> dict:
    p = out / MANIFEST
    return json.loads(p.read_text()) if p.exists() else {"stages": {}}


def record_stage(out: Path, stage: str, cfg: dict, artifacts) -> dict:
    man = read_manifest(out)
    man["stages"][stage] = {
        "seed": cfg["seed"],
        "artifacts": {str(Path(a).relative_to(out)): sha256_file(a) for a in sorted(map(str, artifacts))},
    }
    (out / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man["stages"][stage]


def _guard(paths, force: bool) -> None:
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise OutputExistsError(existing)


def _need(*paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise MissingPathError(p)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _regime_list(cfg: dict):
    out = []
    for label, spec in cfg["data"]["regimes"].items():
        spec = dict(spec)
        spec["peak_hours"] = tuple(spec.get("peak_hours", (8.0, 17.5)))
        out.append((label, ingest.RegimeSpec(**spec)))
    return out


def stage_ingest(cfg: dict, out: Path, force: bool = False) -> dict:
    data = cfg["data"]
    outputs = [out / "flows.csv", out / "meta.csv", out / "adjacency.csv"]
    if not data["synthetic"]:
        if not data.get("flow_csv") or not data.get("meta_csv"):
            raise ValueError("data.flow_csv and data.meta_csv are required when data.synthetic is false")
        _need(data["flow_csv"], data["meta_csv"])
    _guard(outputs, force)
    if data["synthetic"]:
        table = ingest.synth_generate(_regime_list(cfg), data["days"], cfg["seed"], data["start"])
    else:
        table = ingest.load_flow_table(data["flow_csv"], data["meta_csv"])
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_flow_table(table, outputs[0], outputs[1])
    adj = ingest.build_adjacency_by_district(list(table.sensors), data["epsilon"])
    ingest.write_adjacency_triplets(adj, outputs[2])
    logger.info("ingest: %d sensors x %d timestamps", table.num_sensors, table.timestamps.shape[0])
    return record_stage(out, "ingest", cfg, outputs)


def _load_table(out: Path):
    _need(out / "flows.csv", out / "meta.csv", out / "adjacency.csv")
    table = ingest.load_flow_table(out / "flows.csv", out / "meta.csv")
    adj = ingest.read_adjacency_triplets(out / "adjacency.csv", table.sensor_ids)
    return table, adj


def _train_period(cfg, table):
    s = cfg["split"]
    return table.time_slice(s["train_start"], s["train_end"])


def _test_period(cfg, table):
    s = cfg["split"]
    # keep the lookback window that precedes the first test forecast
    start = np.datetime64(s["train_end"].replace(" ", "T"), "s") - np.timedelta64(
        promptgen.LOOKBACK * ingest.INTERVAL_SECONDS, "s")
    return table.time_slice(start, s["test_end"])


def stage_select(cfg: dict, out: Path, force: bool = False) -> dict:
    sel = cfg["select"]
    outputs = [out / "ranking.csv", out / "clustering.csv", out / "pca.csv", out / "selection.json"]
    table = None
    if sel.get("features_csv"):
        _need(sel["features_csv"])
        feats = corridor.read_features_csv(sel["features_csv"])
    else:
        table, _ = _load_table(out)
    _guard(outputs, force)
    if table is not None:
        train = _train_period(cfg, table).select_sensors(lambda s: s.district == str(sel["district"]))
        feats = corridor.corridor_features(train)
    weights = tuple(sel["css_weights"])
    ranking = corridor.css(feats, weights)
    names = [f.corridor for f in feats]
    Z = corridor.zscore(corridor.feature_matrix(feats))
    lo, hi = sel["k_range"]
    hi = min(hi, len(feats))
    if hi < lo:
        raise InsufficientCandidatesError(f"{len(feats)} corridors cannot support k >= {lo}")
    sweep = corridor.elbow_sweep(Z, range(lo, hi + 1), cfg["seed"], sel["n_init"], labels=names)
    if sel.get("k_override") is not None or len(sweep) >= 4:
        k = corridor.elbow_select({k: r.inertia for k, r in sweep.items()}, sel.get("k_override"))
    else:
        k = lo
    clustering = sweep[k] if k in sweep else corridor.kmeans(Z, k, cfg["seed"], sel["n_init"], labels=names)
    domain = corridor.select_domain_corridors(ranking, clustering, sel["domain_cluster"], sel["domain_max_sensors"])
    clients, fed_clustering, _ = corridor.select_fed_clients(
        feats, tuple(sel["band"]), list(sel["exclusions"]) + domain, sel["fed_k"], cfg["seed"], weights,
        sel["n_init"])
    out.mkdir(parents=True, exist_ok=True)
    corridor.write_ranking_csv(ranking, outputs[0])
    corridor.write_clustering_csv(sweep, outputs[1])
    corridor.write_pca_csv(names, corridor.pca2(Z), clustering.assignments, outputs[2])
    zero_shot = []
    if table is not None:
        zero_shot = sorted({s.freeway for s in table.sensors if s.district != str(sel["district"])})
    selection = {
        "k": k,
        "clusters": {n: int(a) for n, a in zip(names, clustering.assignments)},
        "domain_corridors": domain,
        "fed_clients": [c for _, c in clients],
        "fed_clusters": {n: int(a) for n, a in zip(fed_clustering.labels, fed_clustering.assignments)},
        "zero_shot_corridors": zero_shot,
    }
    outputs[3].write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")
    logger.info("select: k=%d domain=%s clients=%s", k, domain, selection["fed_clients"])
    return record_stage(out, "select", cfg, outputs)


def prompt_config(cfg: dict) -> promptgen.PromptConfig:
    p = cfg["prompts"]
    names = {f.name for f in fields(promptgen.PromptConfig)}
    return promptgen.PromptConfig(**{k: v for k, v in p.items() if k in names})


def _selection(out: Path) -> dict:
    _need(out / "selection.json")
    return json.loads((out / "selection.json").read_text())


def _client_list(cfg: dict, selection: dict) -> list[str]:
    clients = selection["fed_clients"]
    n = cfg["fed"].get("clients")
    return clients[:n] if n else clients


def stage_gen_prompts(cfg: dict, out: Path, force: bool = False) -> dict:
    table, adj = _load_table(out)
    selection = _selection(out)
    pdir = out / "prompts"
    clients = _client_list(cfg, selection)
    outputs = [pdir / "domain.jsonl", pdir / "zero_shot.jsonl"]
    for k in range(len(clients)):
        outputs += [pdir / f"client_{k}_train.jsonl", pdir / f"client_{k}_test.jsonl"]
    _guard(outputs, force)
    pcfg = prompt_config(cfg)
    pc = cfg["prompts"]
    seed = cfg["seed"]
    train, test = _train_period(cfg, table), _test_period(cfg, table)
    # adjacency rows follow table.sensors, which time slicing preserves
    pdir.mkdir(parents=True, exist_ok=True)
    jobs = [(outputs[0], train, selection["domain_corridors"], pc["domain_samples"], seed),
            (outputs[1], test, selection["zero_shot_corridors"], pc["zero_shot_samples"], seed + 1)]
    for k, c in enumerate(clients):
        jobs.append((pdir / f"client_{k}_train.jsonl", train, [c], pc["client_train_samples"], seed + 10 + k))
        jobs.append((pdir / f"client_{k}_test.jsonl", test, [c], pc["client_test_samples"], seed + 20 + k))
    for path, period, corridors, n, s in jobs:
        recs = promptgen.generate_records(period, train, adj, corridors, n, s, pcfg) if corridors else []
        promptgen.write_jsonl(recs, path)
        logger.info("gen-prompts: %s <- %d records", path.name, len(recs))
    return record_stage(out, "gen-prompts", cfg, outputs)


def _train_cfg(d: dict, seed: int, total_steps=None) -> adapter.TrainConfig:
    d = dict(d)
    if total_steps is not None:
        d["total_steps"] = total_steps
    d.setdefault("seed", seed)
    return adapter.TrainConfig(**d)


def stage_train_central(cfg: dict, out: Path, force: bool = False) -> dict:
    pdir = out / "prompts"
    _need(pdir / "domain.jsonl")
    outputs = [out / "checkpoint_central.npz", out / "loss_central.csv"]
    _guard(outputs, force)
    records = promptgen.read_jsonl(pdir / "domain.jsonl")
    data = adapter.dataset_from_records(records)
    m = cfg["model"]
    seed = cfg["seed"]
    arch = adapter.ArchConfig(adapter.FEATURE_DIM, tuple(m["hidden"]))
    base = adapter.init_base(arch, seed)
    pre_cfg = _train_cfg(m["pretrain"], seed)
    base, pre_losses = adapter.pretrain_base(base, data, pre_cfg)
    model = adapter.attach_adapters(base, m["rank"], m["alpha"], seed=seed)
    ad_cfg = _train_cfg(m["central"], seed)
    _, ad_losses = adapter.train_adapters(model, data, ad_cfg)
    adapter.save_checkpoint(outputs[0], model, seeds={"init": seed, "pretrain_shuffle": pre_cfg.seed,
                                                     "adapter_shuffle": ad_cfg.seed, "adapter_init": seed})
    with open(outputs[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "step", "lr", "loss"])
        for i, loss in enumerate(pre_losses):
            w.writerow(["pretrain", i, repr(adapter.cosine_lr(i, pre_cfg)), repr(loss)])
        for i, loss in enumerate(ad_losses):
            w.writerow(["adapter", i, repr(adapter.cosine_lr(i, ad_cfg)), repr(loss)])
    logger.info("train-central: pretrain %.4f -> %.4f, adapters %.4f -> %.4f", pre_losses[0], pre_losses[-1],
                ad_losses[0] if ad_losses else float("nan"), ad_losses[-1] if ad_losses else float("nan"))
    return record_stage(out, "train-central", cfg, outputs)


def fed_config(cfg: dict) -> fedsim.FedConfig:
    f = cfg["fed"]
    train = _train_cfg(f["train"], cfg["seed"], total_steps=f["local_steps"])
    return fedsim.FedConfig(rounds=f["rounds"], local_steps=f["local_steps"], base_seed=cfg["seed"], train=train,
                            concurrent=bool(f.get("concurrent", False)), bytes_per_scalar=f["bytes_per_scalar"])


def _client_records(out: Path, n_clients: int, split: str) -> list[list[dict]]:
    paths = [out / "prompts" / f"client_{k}_{split}.jsonl" for k in range(n_clients)]
    _need(*paths)
    return [promptgen.read_jsonl(p) for p in paths]


def stage_train_fed(cfg: dict, out: Path, force: bool = False) -> dict:
    ckpt_path = out / "checkpoint_central.npz"
    _need(ckpt_path)
    clients = _client_list(cfg, _selection(out))
    train_sets = _client_records(out, len(clients), "train")
    test_sets = _client_records(out, len(clients), "test")
    rdir = out / "rounds"
    fcfg = fed_config(cfg)
    outputs = [out / "model_fed.npz", out / "model_pooled.npz", out / "fed_metrics.csv"]
    outputs += [rdir / f"round_{r:02d}.json" for r in range(fcfg.rounds)]
    _guard(outputs, force)
    ckpt = adapter.load_checkpoint(ckpt_path)
    datasets = [(c, tr, te) for c, tr, te in zip(clients, train_sets, test_sets)]
    merged, reports, per_round = fedsim.run_federation(datasets, ckpt, fcfg)
    adapter.save_checkpoint(outputs[0], merged, seeds={"base_seed": fcfg.base_seed})
    fedsim.write_round_reports(reports, rdir)
    with open(outputs[2], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["round", *evalkit.REPORT_HEADER], lineterminator="\n")
        w.writeheader()
        for r, pr in enumerate(per_round):
            for cid, rep in pr["clients"].items():
                for row in rep.rows(f"client-{cid}"):
                    w.writerow({"round": r, **row})
            w.writerow({"round": r, **evalkit._row("global", "overall", pr["global"], 0)})
    # pooled comparator: the same step budget on the union of client data, trained in one place
    pooled = adapter.AdapterModel(ckpt.base, ckpt.adapters.copy())
    pooled_records = [r for recs in train_sets for r in recs]
    pooled_cfg = _train_cfg(cfg["fed"]["train"], cfg["seed"], total_steps=fcfg.rounds * fcfg.local_steps)
    if pooled_cfg.total_steps:
        adapter.train_adapters(pooled, pooled_records, pooled_cfg)
    adapter.save_checkpoint(outputs[1], adapter.merge_adapters(pooled), seeds={"shuffle": pooled_cfg.seed})
    return record_stage(out, "train-fed", cfg, outputs)


def stage_evaluate(cfg: dict, out: Path, force: bool = False, zero_shot: bool = False) -> dict:
    pcfg = prompt_config(cfg)
    model_path = out / "model_fed.npz"
    _need(model_path)
    model = adapter.load_checkpoint(model_path)
    selection = _selection(out)
    clients = _client_list(cfg, selection)
    if zero_shot:
        zs_path = out / "prompts" / "zero_shot.jsonl"
        _need(zs_path)
        outputs = [out / "zero_shot_report.csv", out / "zero_shot_series.csv", out / "zero_shot_summary.json"]
        _guard(outputs, force)
        records = promptgen.read_jsonl(zs_path)
        train_corridors = list(selection["domain_corridors"]) + list(clients)
        sizes = [s for s in cfg["eval"]["zero_shot_sizes"]]
        reps = evalkit.zero_shot_eval(model, records, sizes, train_corridors, seed=cfg["seed"], cfg=pcfg)
        by_scope = {r.scope: r for r in reps}
        evalkit.write_report_csv(by_scope, outputs[0])
        evalkit.write_horizon_series_csv(by_scope, outputs[1])
        outputs[2].write_text(json.dumps({k: evalkit.report_to_dict(v) for k, v in by_scope.items()}, indent=2,
                                         sort_keys=True) + "\n")
        return record_stage(out, "evaluate-zero-shot", cfg, outputs)

    outputs = [out / "report.csv", out / "report_series.csv", out / "summary.json"]
    _guard(outputs, force)
    test_sets = _client_records(out, len(clients), "test")
    comparators = {"fed": model, "checkpoint": adapter.load_checkpoint(out / "checkpoint_central.npz"),
                   "hourly-profile": evalkit.hourly_profile_baseline}
    if (out / "model_pooled.npz").exists():
        comparators["pooled-central"] = adapter.load_checkpoint(out / "model_pooled.npz")
    scoped, summary = {}, {}
    for name, m in comparators.items():
        per_client = {f"client-{k}": evalkit.evaluate(m, recs, pcfg, scope=f"client-{k}")
                      for k, recs in enumerate(test_sets)}
        glob = evalkit.weighted_report(per_client)
        prefix = "" if name == "fed" else f"{name}:"
        for scope, rep in per_client.items():
            scoped[prefix + scope] = rep
        scoped[prefix + "global"] = glob
        summary[name] = evalkit.report_to_dict(glob)
    evalkit.write_report_csv(scoped, outputs[0])
    evalkit.write_horizon_series_csv(scoped, outputs[1])
    outputs[2].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return record_stage(out, "evaluate", cfg, outputs)


STAGES = ("ingest", "select", "gen-prompts", "train-central", "train-fed", "evaluate")


def run_all(cfg: dict, out: Path, force: bool = False) -> dict:
    timings = {}
    for name, fn in [("ingest", stage_ingest), ("select", stage_select), ("gen-prompts", stage_gen_prompts),
                     ("train-central", stage_train_central), ("train-fed", stage_train_fed),
                     ("evaluate", stage_evaluate)]:
        t = time.perf_counter()
        fn(cfg, out, force)
        timings[name] = time.perf_counter() - t
    stage_evaluate(cfg, out, force, zero_shot=True)
    return timings
