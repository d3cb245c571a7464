"""Label-efficient adaptation to a shifted domain.

Three strictly sequential phases: collect a small set of unlabeled
visual-audio pairs, fine-tune the VAR++ with the self-supervised contrastive
objective, then let the policy self-improve with Eq.-4-style rewards toward
goals sampled from the collected sounds.  No intent ID from the shifted
domain is ever read.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envsim
from .envsim import EnvConfig, UnlabeledPair
from .evalharness import LabelLedger, record_labels
from .policy import PolicyNet, PpoConfig, load_policy, policy_actor, save_policy, success_rate, train_rl
from .varmodel import PairArrays, VarModel, load_var, save_var, train_var, with_config

log = logging.getLogger(__name__)

REPORT_KEYS = ("pairs_used", "labels_used", "sr_before_shift", "sr_after_shift_pre_ft", "sr_after_ft", "rl_steps")


class NoGoalSoundsError(RuntimeError):
    pass


@dataclass
class FinetuneBudget:
    pairs: int = 480
    rl_steps: int = 100_000
    ledger: LabelLedger = field(default_factory=LabelLedger)

    def __post_init__(self):
        if self.pairs < 0 or self.rl_steps < 0:
            raise ValueError("budgets must be non-negative")


def collect_unlabeled_pairs(cfg: EnvConfig, count: int, seed: int,
                            ledger: LabelLedger | None = None) -> list[UnlabeledPair]:
    """``count`` pairs from ``cfg`` with the intent stripped; each pair costs
    one label (someone vouched that image and sound belong together)."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if ledger is not None:
        record_labels(ledger, "var_pair", count)
    if count == 0:
        return []
    return [UnlabeledPair(p.image, p.sound) for p in envsim.collect_pairs(cfg, count, seed)]


def goal_pool(pairs: list[UnlabeledPair]) -> list[np.ndarray]:
    """Distinct non-empty sounds, in collection order."""
    seen: dict[bytes, np.ndarray] = {}
    for p in pairs:
        if p.sound.any():
            seen.setdefault(p.sound.tobytes(), p.sound)
    return list(seen.values())


def finetune_var(var: VarModel, pairs: list[UnlabeledPair], epochs: int = 20, batch_size: int = 64,
                 seed: int = 0) -> VarModel:
    """Copy of ``var`` trained with SSC + BCE on ``pairs``.  Sets smaller
    than two batches are used whole in every step."""
    model = with_config(var)
    data = PairArrays(np.stack([p.image for p in pairs]).astype(np.float32), np.stack([p.sound for p in pairs]))
    if len(pairs) < 2 * batch_size:
        batch_size = len(pairs)
    train_var(model, data, epochs=epochs, batch_size=batch_size, seed=seed, unlabeled=True)
    return model


@dataclass
class FinetuneResult:
    var: VarModel
    policy: PolicyNet
    report: dict


def run_finetune(var: VarModel | str | Path, policy: PolicyNet | str | Path, shifted: EnvConfig,
                 budget: FinetuneBudget, seed: int = 0, *, nominal: EnvConfig | None = None,
                 ppo: PpoConfig | None = None, episodes_per_intent: int = 50, use_current_sound: bool = False,
                 epochs: int = 20, out_dir: str | Path | None = None) -> FinetuneResult:
    """Collect, fine-tune the VAR++, self-improve the policy, and report
    success rates before the shift, after it, and after fine-tuning.

    ``use_current_sound`` adds the current-sound term to the reward when the
    environment supplies one; it is off by default.
    """
    var = load_var(var) if isinstance(var, (str, Path)) else var
    policy = load_policy(policy) if isinstance(policy, (str, Path)) else policy
    ledger = budget.ledger

    sr_before = None
    if nominal is not None:
        sr_before = success_rate(policy_actor(policy, var, seed=seed), nominal, episodes_per_intent, seed)["overall"]
    sr_shift = success_rate(policy_actor(policy, var, seed=seed), shifted, episodes_per_intent, seed)["overall"]

    pairs = collect_unlabeled_pairs(shifted, budget.pairs, seed, ledger)
    labels_after_collection = ledger.total
    goals = goal_pool(pairs)
    var_updated = bool(pairs)
    tuned = finetune_var(var, pairs, epochs=epochs, seed=seed) if var_updated else with_config(var)
    log.info("fine-tuned VAR on %d pairs (%d distinct goal sounds)", len(pairs), len(goals))

    new_policy = PolicyNet(policy.cfg)
    new_policy.load_state_dict(policy.state_dict())
    if budget.rl_steps > 0:
        sampler = None
        if budget.pairs > 0:
            if not goals:
                raise NoGoalSoundsError("no non-empty sound among the collected pairs to use as a goal")
            sampler = lambda rng: goals[int(rng.integers(len(goals)))]
        ppo = replace(ppo or PpoConfig(), total_steps=budget.rl_steps)
        metrics_path = None if out_dir is None else Path(out_dir) / "metrics" / "finetune_rl.csv"
        train_rl(shifted, tuned, ppo, "eq5" if use_current_sound else "eq4", seed=seed, policy=new_policy,
                 goal_sampler=sampler, metrics_path=metrics_path, track_success=sampler is None)
    if ledger.total != labels_after_collection:
        raise AssertionError("labels were consumed during the self-supervised phase")

    sr_after = success_rate(policy_actor(new_policy, tuned, seed=seed), shifted, episodes_per_intent, seed)["overall"]
    report = {
        "pairs_used": len(pairs),
        "labels_used": ledger.total,
        "sr_before_shift": sr_before,
        "sr_after_shift_pre_ft": sr_shift,
        "sr_after_ft": sr_after,
        "rl_steps": budget.rl_steps,
        "labels_during_rl": ledger.total - labels_after_collection,
        "var_updated": var_updated,
        "goal_sounds": len(goals),
    }
    if out_dir is not None:
        out = Path(out_dir)
        save_var(tuned, out / "checkpoints" / "var_finetuned.ckpt")
        save_policy(new_policy, out / "checkpoints" / "policy_finetuned.ckpt")
        write_report(out / "reports" / "finetune.json", report)
    return FinetuneResult(tuned, new_policy, report)


def write_report(path: str | Path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
