"""Experiment orchestration: run directories, stage pipeline, seeding.

A run directory is created by the gen-data stage and carries a manifest at
its root; every later stage reads the manifest instead of taking a config, so
a run's inputs cannot drift. Layout:

    manifest.json
    data/            raw.npy, users.json, extractor.json, embeddings.csv
    calibration/     <matcher>_<scheme>[_nu*].json
    heuristic/       <matcher>_<scheme>[_nu*].json
    attack/          <mode>_<matcher>_<scheme>[_nu*]/results.json
    detect/          <detector>_<attack label>.json
    report/          summary.csv, trajectories.csv

All randomness flows from the manifest seed through labeled hash-derived
streams, so stage order, worker count, and scheduling cannot change results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    AttackResult,
    batch_masked_generate,
    fit_heuristic,
    HeuristicModel,
    records_from_results,
    run_poisoning,
    select_generation_batch,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    SweepConfig,
    config_from_dict,
    config_to_dict,
)
from .defense import (
    DetectorConfig,
    FactorConfig,
    FACTORS,
    calibrate_detector,
    calibrate_hypersphere_radius,
    detect,
    generate_variation_sequences,
    poisoning_sequence,
    sanitize_hypersphere,
    window_drifts,
)
from .features import (
    block_mask,
    FeatureExtractor,
    generate_synthetic_population,
    Layer,
    perturbed_extractor,
    PopulationDataset,
    random_extractor,
    save_embeddings,
    UserSamples,
)
from .matchers import calibrate_threshold_at_eer, Template, train
from .metrics import aggregate, summary_csv, trajectories_csv
from .updating import AuthSystem, enrol

__all__ = [
    "MissingArtifactError",
    "MANIFEST_NAME",
    "ATTACK_MODES",
    "DETECTORS",
    "derive_seed",
    "UserPools",
    "split_pools",
    "PairAssignment",
    "assign_pairs",
    "config_label",
    "extractor_to_dict",
    "extractor_from_dict",
    "RunContext",
    "load_run",
    "load_manifest",
    "stage_gen_data",
    "stage_calibrate",
    "stage_fit_heuristic",
    "stage_attack",
    "stage_detect",
    "stage_report",
    "run_pair",
]

MANIFEST_NAME = "manifest.json"
ATTACK_MODES = ("oracle", "heuristic", "iterative", "transfer")
DETECTORS = ("cosine", "hypersphere")


class MissingArtifactError(FileNotFoundError):
    """A stage needs an artifact a prior command has not produced yet."""


def _require(path: Path, prior_command: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"{path} not found; run `poisonsim {prior_command}` first")
    return path


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, payload: dict) -> None:
    _write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _timestamp() -> int:
    # SOURCE_DATE_EPOCH pins the manifest timestamp for bitwise-reproducible runs
    stamp = os.environ.get("SOURCE_DATE_EPOCH")
    return int(stamp) if stamp is not None else int(time.time())


def derive_seed(master_seed: int, *labels) -> int:
    """Stable 63-bit seed for one named random stream of a run.

    Hash-derived (not sequential) so adding a stream or reordering stages
    never shifts any other stream.
    """
    text = ":".join([str(int(master_seed)), *map(str, labels)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---------------------------------------------------------------------------
# pools and pairs


@dataclass(frozen=True)
class UserPools:
    """Disjoint user roles: threshold calibration, attackers, victims."""

    calibration: tuple[str, ...]
    attackers: tuple[str, ...]
    victims: tuple[str, ...]


def split_pools(user_ids, sweep: SweepConfig) -> UserPools:
    """Carve the sorted user ids into the three disjoint pools."""
    ids = sorted(user_ids)
    need = sweep.n_calibration + sweep.n_attackers + sweep.n_victims
    if need > len(ids):
        raise ConfigError(
            f"pools need {need} users but the dataset has {len(ids)}; "
            "pools must not overlap")
    cal = tuple(ids[:sweep.n_calibration])
    att = tuple(ids[sweep.n_calibration:sweep.n_calibration + sweep.n_attackers])
    vic = tuple(ids[sweep.n_calibration + sweep.n_attackers:need])
    return UserPools(calibration=cal, attackers=att, victims=vic)


@dataclass(frozen=True)
class PairAssignment:
    """One attacker-victim pairing with its private seed."""

    attacker_id: str
    victim_id: str
    seed: int

    def __post_init__(self):
        if self.attacker_id == self.victim_id:
            raise ValueError("attacker and victim must differ")


def assign_pairs(pools: UserPools, n_pairs: int,
                 master_seed: int) -> tuple[PairAssignment, ...]:
    """Pick n_pairs from the attacker x victim grid, each with a derived seed."""
    grid = [(a, v) for a in pools.attackers for v in pools.victims if a != v]
    if n_pairs > len(grid):
        raise ConfigError(f"n_pairs={n_pairs} exceeds the {len(grid)}-pair grid")
    if n_pairs == len(grid):
        chosen = grid
    else:
        rng = np.random.default_rng(derive_seed(master_seed, "pairs"))
        picks = sorted(rng.choice(len(grid), size=n_pairs, replace=False))
        chosen = [grid[int(i)] for i in picks]
    return tuple(
        PairAssignment(a, v, derive_seed(master_seed, "pair", a, v))
        for a, v in chosen)


def config_label(matcher_kind: str, scheme: str, nu: float | None = None) -> str:
    """File-system label for one matcher configuration."""
    label = f"{matcher_kind}_{scheme}"
    if matcher_kind == "ocsvm":
        label += f"_nu{nu:g}"
    return label


# ---------------------------------------------------------------------------
# dataset and extractor persistence


def extractor_to_dict(extractor: FeatureExtractor) -> dict:
    return {
        "layers": [
            {"weight": [[float(v) for v in row] for row in layer.weight],
             "bias": [float(v) for v in layer.bias],
             "activation": layer.activation}
            for layer in extractor.layers
        ],
        "l2_normalize": extractor.l2_normalize,
        "seed": extractor.seed,
    }


def extractor_from_dict(data: dict) -> FeatureExtractor:
    layers = tuple(
        Layer(np.asarray(d["weight"], dtype=float),
              np.asarray(d["bias"], dtype=float), d["activation"])
        for d in data["layers"])
    return FeatureExtractor(layers, l2_normalize=data["l2_normalize"],
                            seed=data["seed"])


@dataclass(frozen=True)
class RunContext:
    """A loaded run directory: config, dataset, and extractor."""

    root: Path
    cfg: ExperimentConfig
    dataset: PopulationDataset
    extractor: FeatureExtractor

    @property
    def pools(self) -> UserPools:
        return split_pools(self.dataset.user_ids, self.cfg.sweep)

    def far_panel(self) -> np.ndarray:
        """Other-user probes for FAR tracking: calibration-pool test samples."""
        return np.concatenate([
            self.dataset.users[uid].test_embeddings
            for uid in self.pools.calibration])


def load_manifest(run_dir) -> dict:
    path = _require(Path(run_dir) / MANIFEST_NAME,
                    "gen-data --config <file> --out <dir>")
    return _read_json(path)


def load_run(run_dir) -> RunContext:
    """Rebuild the dataset and extractor a gen-data stage persisted.

    Embeddings are recomputed from the stored raw samples and extractor, which
    reproduces the generated values bitwise.
    """
    root = Path(run_dir)
    manifest = load_manifest(root)
    cfg = config_from_dict(manifest["config"])
    data_dir = root / "data"
    hint = "gen-data --config <file> --out <dir>"
    extractor = extractor_from_dict(_read_json(_require(
        data_dir / "extractor.json", hint)))
    raw = np.load(_require(data_dir / "raw.npy", hint))
    users_meta = _read_json(_require(data_dir / "users.json", hint))
    enrolment = int(users_meta["enrolment_size"])
    users: dict[str, UserSamples] = {}
    for i, uid in enumerate(users_meta["user_ids"]):
        user_raw = raw[i]
        users[uid] = UserSamples(
            raw=user_raw,
            embeddings=extractor.extract_batch(user_raw),
            train_idx=np.arange(enrolment),
            test_idx=np.arange(enrolment, user_raw.shape[0]))
    dataset = PopulationDataset(users=users, mode="raw")
    return RunContext(root=root, cfg=cfg, dataset=dataset, extractor=extractor)


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(cfg: ExperimentConfig, out_dir) -> dict:
    """Generate the population, persist it, and write the manifest."""
    root = Path(out_dir)
    data_dir = root / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    extractor = random_extractor(
        cfg.population.d_in, cfg.extractor.d_emb, cfg.extractor.hidden,
        seed=derive_seed(cfg.seed, "extractor"),
        l2_normalize=cfg.extractor.l2_normalize)
    dataset = generate_synthetic_population(
        cfg.population, extractor, derive_seed(cfg.seed, "population"))

    raw = np.stack([dataset.users[uid].raw for uid in dataset.user_ids])
    np.save(data_dir / "raw.npy", raw)
    _write_json(data_dir / "users.json", {
        "user_ids": list(dataset.user_ids),
        "enrolment_size": cfg.population.enrolment_size,
    })
    _write_json(data_dir / "extractor.json", extractor_to_dict(extractor))
    save_embeddings(dataset, data_dir / "embeddings.csv")

    fingerprint = hashlib.sha256()
    fingerprint.update((data_dir / "raw.npy").read_bytes())
    fingerprint.update((data_dir / "embeddings.csv").read_bytes())
    manifest = {
        "artifact_version": __version__,
        "created_unix": _timestamp(),
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "population_sha256": fingerprint.hexdigest(),
    }
    _write_json(root / MANIFEST_NAME, manifest)
    return manifest


def stage_calibrate(ctx: RunContext, matcher_kind: str, scheme: str,
                    nu: float | None = None) -> dict:
    """Pool genuine/impostor scores over the calibration users; fix the EER
    threshold for one matcher configuration and persist it."""
    pools = ctx.pools
    genuine: list[np.ndarray] = []
    impostor: list[np.ndarray] = []
    for uid in pools.calibration:
        template = Template.from_embeddings(ctx.dataset.users[uid].train_embeddings)
        matcher = train(matcher_kind, template, scheme, nu=nu, threshold=0.0)
        genuine.append(matcher.score_batch(ctx.dataset.users[uid].test_embeddings))
        for other in pools.calibration:
            if other != uid:
                impostor.append(matcher.score_batch(
                    ctx.dataset.users[other].test_embeddings))
    threshold, eer = calibrate_threshold_at_eer(
        np.concatenate(genuine), np.concatenate(impostor))
    record = {
        "matcher": matcher_kind,
        "scheme": scheme,
        "nu": nu if matcher_kind == "ocsvm" else None,
        "threshold": threshold,
        "eer": eer,
        "n_genuine": int(sum(g.size for g in genuine)),
        "n_impostor": int(sum(s.size for s in impostor)),
    }
    label = config_label(matcher_kind, scheme, nu)
    _write_json(ctx.root / "calibration" / f"{label}.json", record)
    return record


def _load_threshold(ctx: RunContext, matcher_kind: str, scheme: str,
                    nu: float | None) -> float:
    label = config_label(matcher_kind, scheme, nu)
    path = _require(
        ctx.root / "calibration" / f"{label}.json",
        f"calibrate --data {ctx.root} --matcher {matcher_kind} --weights {scheme}")
    return float(_read_json(path)["threshold"])


def build_victim_system(ctx: RunContext, victim_id: str, matcher_kind: str,
                        scheme: str, nu: float | None,
                        threshold: float) -> AuthSystem:
    template = Template.from_embeddings(
        ctx.dataset.users[victim_id].train_embeddings)
    return enrol(template, matcher_kind, scheme, threshold, nu=nu,
                 extractor=ctx.extractor)


def run_pair(ctx: RunContext, pair: PairAssignment, *, matcher_kind: str,
             scheme: str, nu: float | None, threshold: float, mode: str,
             heuristic_model: HeuristicModel | None = None,
             surrogate: FeatureExtractor | None = None) -> AttackResult:
    """One poisoning run: build the victim system, generate, inject, measure.

    The attacker's known victim sample is the victim's best-scoring accepted
    test sample (the premise is an adversary holding one high-quality usable
    capture, e.g. a clear frontal photo); a victim whose whole test set is
    rejected yields a no-start failure. The generation batch is drawn from
    the attacker's test samples and perturbed through a contiguous block
    mask (sweep.mask_fraction of the input), so batch members keep their
    identity outside the accessory footprint; IAR is tracked on the full
    unperturbed attacker test set. In transfer mode the trace comes from the
    surrogate extractor while the gate runs the real one.
    """
    if mode == "transfer" and surrogate is None:
        raise ValueError("transfer mode needs a surrogate extractor")
    rng = np.random.default_rng(pair.seed)
    attacker = ctx.dataset.users[pair.attacker_id]
    victim = ctx.dataset.users[pair.victim_id]
    sys = build_victim_system(ctx, pair.victim_id, matcher_kind, scheme, nu,
                              threshold)
    accepted = np.flatnonzero(sys.matcher.decide_batch(victim.test_embeddings))
    if accepted.size == 0:
        def rate(embeddings):
            return float(np.mean(sys.matcher.decide_batch(embeddings)))
        return AttackResult(
            success=False, injections_attempted=0, injections_accepted=0,
            failures=0, stagnated=True,
            iar_trajectory=(rate(attacker.test_embeddings),),
            far_trajectory=(rate(ctx.far_panel()),),
            frr_trajectory=(1.0 - rate(victim.test_embeddings),),
            events=(), matcher_kind=matcher_kind, scheme=scheme, mode=mode,
            nu=nu, attacker_id=pair.attacker_id, victim_id=pair.victim_id,
            seed=pair.seed)
    scores = sys.matcher.score_batch(victim.test_embeddings)
    known = victim.test_raw[int(accepted[np.argmax(scores[accepted])])]
    gen_extractor = surrogate if mode == "transfer" else ctx.extractor
    batch = select_generation_batch(attacker.test_raw, gen_extractor,
                                    ctx.cfg.sweep.batch_size)
    mask = block_mask(gen_extractor.d_in, ctx.cfg.sweep.mask_fraction)
    trace = batch_masked_generate(
        gen_extractor, batch, mask, gen_extractor.extract(known),
        ctx.cfg.generation, rng)
    result = run_poisoning(
        sys, attacker.test_raw, known, ctx.cfg.attack, ctx.cfg.generation,
        "oracle" if mode == "transfer" else mode,
        heuristic_model=heuristic_model, mask=mask, trace=trace,
        victim_test=victim.test_embeddings, other_samples=ctx.far_panel(),
        rng=rng, attacker_id=pair.attacker_id, victim_id=pair.victim_id,
        seed=pair.seed)
    if mode == "transfer":
        result = dataclasses.replace(result, mode="transfer")
    return result


_WORKER_CTX: RunContext | None = None
_WORKER_TASK: dict | None = None


def _pair_worker_init(run_dir: str, task: dict) -> None:
    global _WORKER_CTX, _WORKER_TASK
    _WORKER_CTX = load_run(run_dir)
    _WORKER_TASK = task


def _pair_worker(indexed_pair) -> tuple[int, dict]:
    index, pair = indexed_pair
    result = run_pair(_WORKER_CTX, pair, **_WORKER_TASK)
    return index, result.to_dict()


def _run_pairs(ctx: RunContext, pairs, task: dict, jobs: int) -> list[AttackResult]:
    """Run the pair sweep, serially or on a process pool.

    Workers rebuild the context from disk once (initializer) and results are
    reassembled in pair order, so the worker count never affects output.
    """
    if jobs <= 1:
        return [run_pair(ctx, pair, **task) for pair in pairs]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_pair_worker_init,
                             initargs=(str(ctx.root), task)) as pool:
        gathered = sorted(pool.map(_pair_worker, enumerate(pairs)))
    return [AttackResult.from_dict(d) for _, d in gathered]


def _heuristic_path(ctx: RunContext, matcher_kind: str, scheme: str,
                    nu: float | None) -> Path:
    return ctx.root / "heuristic" / f"{config_label(matcher_kind, scheme, nu)}.json"


def stage_fit_heuristic(ctx: RunContext, matcher_kind: str, scheme: str,
                        nu: float | None = None, n_pairs: int | None = None,
                        jobs: int = 1) -> dict:
    """Fit the injection heuristic on oracle runs against calibration users.

    Victims come from the calibration pool, so no attack-phase victim is ever
    seen during fitting. Ranks with fewer than 3 accepted injections are
    dropped before fitting; deeper requests fall back to the last fitted rank.
    """
    threshold = _load_threshold(ctx, matcher_kind, scheme, nu)
    pools = ctx.pools
    n_pairs = n_pairs if n_pairs is not None else ctx.cfg.sweep.heuristic_pairs
    grid = [(a, v) for a in pools.attackers for v in pools.calibration if a != v]
    if n_pairs > len(grid):
        raise ConfigError(
            f"heuristic_pairs={n_pairs} exceeds the {len(grid)}-pair grid")
    rng = np.random.default_rng(derive_seed(ctx.cfg.seed, "heuristic-pairs"))
    picks = sorted(rng.choice(len(grid), size=n_pairs, replace=False))
    pairs = tuple(
        PairAssignment(a, v, derive_seed(ctx.cfg.seed, "heuristic-pair", a, v))
        for a, v in (grid[int(i)] for i in picks))
    task = dict(matcher_kind=matcher_kind, scheme=scheme, nu=nu,
                threshold=threshold, mode="oracle")
    results = _run_pairs(ctx, pairs, task, jobs)
    records = records_from_results(results)
    counts: dict[int, int] = {}
    for rec in records:
        counts[rec.rank] = counts.get(rec.rank, 0) + 1
    usable = [rec for rec in records if counts[rec.rank] >= 3]
    model = fit_heuristic(usable)
    payload = {
        "matcher": matcher_kind,
        "scheme": scheme,
        "nu": nu if matcher_kind == "ocsvm" else None,
        "n_pairs": n_pairs,
        "pairs": [[p.attacker_id, p.victim_id] for p in pairs],
        "n_records": len(records),
        "n_records_used": len(usable),
        "model": model.to_dict(),
    }
    _write_json(_heuristic_path(ctx, matcher_kind, scheme, nu), payload)
    return payload


def load_heuristic(ctx: RunContext, matcher_kind: str, scheme: str,
                   nu: float | None) -> HeuristicModel:
    path = _require(
        _heuristic_path(ctx, matcher_kind, scheme, nu),
        f"fit-heuristic --data {ctx.root} --matcher {matcher_kind} "
        f"--weights {scheme}")
    return HeuristicModel.from_dict(_read_json(path)["model"])


def stage_attack(ctx: RunContext, mode: str, matcher_kind: str, scheme: str,
                 nu: float | None = None, jobs: int = 1) -> list[AttackResult]:
    """Sweep every assigned attacker-victim pair for one configuration."""
    if mode not in ATTACK_MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {ATTACK_MODES}")
    threshold = _load_threshold(ctx, matcher_kind, scheme, nu)
    task = dict(matcher_kind=matcher_kind, scheme=scheme, nu=nu,
                threshold=threshold, mode=mode)
    if mode == "heuristic":
        task["heuristic_model"] = load_heuristic(ctx, matcher_kind, scheme, nu)
    if mode == "transfer":
        task["surrogate"] = perturbed_extractor(
            ctx.extractor, ctx.cfg.sweep.surrogate_rel_scale,
            seed=derive_seed(ctx.cfg.seed, "surrogate"))
    pairs = assign_pairs(ctx.pools, ctx.cfg.sweep.n_pairs, ctx.cfg.seed)
    results = _run_pairs(ctx, pairs, task, jobs)
    label = f"{mode}_{config_label(matcher_kind, scheme, nu)}"
    payload = {
        "label": label,
        "mode": mode,
        "matcher": matcher_kind,
        "scheme": scheme,
        "nu": nu if matcher_kind == "ocsvm" else None,
        "threshold": threshold,
        "results": [r.to_dict() for r in results],
    }
    _write_json(ctx.root / "attack" / label / "results.json", payload)
    return results


def load_attack_results(ctx: RunContext, label: str) -> list[AttackResult]:
    path = _require(
        ctx.root / "attack" / label / "results.json",
        f"attack --data {ctx.root} --mode <mode> --matcher <kind>")
    payload = _read_json(path)
    return [AttackResult.from_dict(d) for d in payload["results"]]


def _legit_sequences(ctx: RunContext) -> list[tuple[str, object]]:
    """(owner_id, sequence) for every factor; owners cycle the sorted user ids
    exactly as the sequence generator does."""
    user_ids = sorted(ctx.dataset.users)
    out = []
    for factor in FACTORS:
        fc = FactorConfig(factor, ctx.cfg.detection.sequences_per_factor,
                          sequence_length=ctx.cfg.detection.sequence_length)
        seqs = generate_variation_sequences(
            ctx.dataset, fc, ctx.extractor,
            derive_seed(ctx.cfg.seed, "variation", factor))
        out.extend((user_ids[s % len(user_ids)], seq)
                   for s, seq in enumerate(seqs))
    return out


def _enrolment_centroid(ctx: RunContext, user_id: str) -> np.ndarray:
    return ctx.dataset.users[user_id].train_embeddings.mean(axis=0)


def stage_detect(ctx: RunContext, detector: str, attack_label: str) -> dict:
    """Evaluate one detector on an attack sweep's injection sequences against
    legitimate variation sequences, and persist the summary."""
    if detector not in DETECTORS:
        raise ConfigError(
            f"unknown detector {detector!r}; expected one of {DETECTORS}")
    results = load_attack_results(ctx, attack_label)
    n0 = ctx.cfg.population.enrolment_size
    poisons = [
        (r.victim_id, poisoning_sequence(r.events))
        for r in results if len(r.events) >= 2]
    if not poisons:
        raise MissingArtifactError(
            f"attack sweep {attack_label!r} has no run with >= 2 accepted "
            f"injections; run `poisonsim attack --data {ctx.root}` with a "
            "larger budget first")
    legits = _legit_sequences(ctx)

    if detector == "cosine":
        probe = DetectorConfig(cos_threshold=0.0, consecutive_flags_to_alarm=1)
        legit_cos = [
            detect(seq, _enrolment_centroid(ctx, uid), probe,
                   initial_count=n0).cosines
            for uid, seq in legits]
        poison_cos = [
            detect(seq, _enrolment_centroid(ctx, uid), probe,
                   initial_count=n0).cosines
            for uid, seq in poisons]
        threshold, eer = calibrate_detector(
            np.concatenate(legit_cos), np.concatenate(poison_cos))
        tuned = DetectorConfig(
            cos_threshold=threshold,
            consecutive_flags_to_alarm=ctx.cfg.detection.consecutive_flags_to_alarm)
        poison_reports = [
            detect(seq, _enrolment_centroid(ctx, uid), tuned, initial_count=n0)
            for uid, seq in poisons]
        legit_reports = [
            detect(seq, _enrolment_centroid(ctx, uid), tuned, initial_count=n0)
            for uid, seq in legits]
        factor_eer = {}
        for factor in FACTORS:
            cos = [c for (uid, seq), c in zip(legits, legit_cos)
                   if seq.factor == factor]
            factor_eer[factor] = calibrate_detector(
                np.concatenate(cos), np.concatenate(poison_cos))[1]
        summary = {
            "detector": "cosine",
            "attack_label": attack_label,
            "threshold": threshold,
            "eer": eer,
            "factor_eer": factor_eer,
            "n_legit": len(legits),
            "n_poison": len(poisons),
            "poison_alarm_rate": float(np.mean(
                [r.alarm for r in poison_reports])),
            # pair 0 compares injections 1 and 2, so alarm_index 0 means the
            # alarm fired as the second accepted injection arrived
            "poison_alarm_by_second": float(np.mean(
                [r.alarm and r.alarm_index == 0 for r in poison_reports])),
            "legit_alarm_rate": float(np.mean(
                [r.alarm for r in legit_reports])),
        }
    else:
        k = ctx.cfg.detection.window
        drifts = np.concatenate([
            window_drifts(seq.embeddings, _enrolment_centroid(ctx, uid), k,
                          initial_count=n0)
            for uid, seq in legits] or [np.empty(0)])
        if drifts.size == 0:
            raise ConfigError(
                "no legitimate window drifts; detection.window exceeds "
                "detection.sequence_length")
        radius = calibrate_hypersphere_radius(
            drifts, ctx.cfg.detection.radius_percentile)
        poison_reports = [
            sanitize_hypersphere(seq.embeddings, _enrolment_centroid(ctx, uid),
                                 k, radius, initial_count=n0)
            for uid, seq in poisons]
        legit_reports = [
            sanitize_hypersphere(seq.embeddings, _enrolment_centroid(ctx, uid),
                                 k, radius, initial_count=n0)
            for uid, seq in legits]
        summary = {
            "detector": "hypersphere",
            "attack_label": attack_label,
            "radius": radius,
            "window": k,
            "n_legit": len(legits),
            "n_poison": len(poisons),
            "poison_revert_rate": float(np.mean(
                [r.reverted_any for r in poison_reports])),
            "legit_revert_rate": float(np.mean(
                [r.reverted_any for r in legit_reports])),
        }
    _write_json(ctx.root / "detect" / f"{detector}_{attack_label}.json", summary)
    return summary


def stage_report(ctx: RunContext) -> dict:
    """Aggregate every attack sweep into the report CSVs."""
    attack_dir = ctx.root / "attack"
    labels = sorted(p.parent.name for p in attack_dir.glob("*/results.json"))
    if not labels:
        raise MissingArtifactError(
            f"{attack_dir} holds no results; run `poisonsim attack --data "
            f"{ctx.root} ...` first")
    labeled_reports = []
    all_results: list[AttackResult] = []
    for label in labels:
        results = load_attack_results(ctx, label)
        labeled_reports.append((label, aggregate(results)))
        all_results.extend(results)
    _write_text(ctx.root / "report" / "summary.csv",
                summary_csv(labeled_reports))
    _write_text(ctx.root / "report" / "trajectories.csv",
                trajectories_csv(all_results))
    return {"labels": labels, "n_results": len(all_results)}
