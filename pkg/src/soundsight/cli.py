"""Command-line driver.

    soundsight gen-data    --config c.json
    soundsight train-var   --config c.json [--loss supcon|triplet] [--centered true|false]
    soundsight eval-var    --config c.json --ckpt v.ckpt
    soundsight train-rl    --config c.json [--reward eq4|eq5]
    soundsight eval-rl     --config c.json [--shifted] [--dump-frames]
    soundsight shift-domain --config c.json [--shift-seed K]
    soundsight finetune    --config c.json [--pairs U]
    soundsight report      --config c.json

Outputs land under ``--out`` (default: ``paths.out`` in the config) in
``checkpoints/``, ``metrics/``, ``reports/`` and ``frames/``.  Exit status
is 0 on success, 1 on usage or configuration errors, 2 on runtime failures.
"""

from __future__ import annotations

import os

# cap BLAS pools before numpy loads
_THREADS = os.environ.get("SOUNDSIGHT_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset, envsim, evalharness, finetune, policy, varmodel
from .audio import MfccConfig
from .envsim import EnvConfig

log = logging.getLogger("soundsight")


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

ENV_KEYS = ("grid_size", "intent_count", "image_size", "max_episode_length", "success_hold", "hear_distance",
            "hear_cone", "seed", "forward_success", "sound_variants")
PLAIN_SECTIONS = {
    "data": {"train_pairs": 2000, "test_pairs": 500, "train_seed": 1, "test_seed": 2},
    "finetune": {"pairs": 480, "rl_steps": 100_000, "shift_seed": 1, "use_current_sound": False, "epochs": 20},
    "eval": {"episodes_per_intent": 50, "greedy": False},
    "paths": {"out": "runs/default"},
}
TYPED_SECTIONS = {
    "mfcc": MfccConfig,
    "var": varmodel.VarConfig,
    "policy": policy.PolicyConfig,
    "ppo": policy.PpoConfig,
}


@dataclasses.dataclass
class RunConfig:
    env: EnvConfig
    var: varmodel.VarConfig
    policy: policy.PolicyConfig
    ppo: policy.PpoConfig
    data: dict
    finetune: dict
    eval: dict
    paths: dict
    seed: int
    raw: dict

    @property
    def out(self) -> Path:
        return Path(self.paths["out"])


def _typed(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {"env", "seed", *PLAIN_SECTIONS, *TYPED_SECTIONS}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    env_raw = dict(raw.get("env", {}))
    bad = set(env_raw) - set(ENV_KEYS)
    if bad:
        raise ConfigError(f"unknown keys in [env]: {sorted(bad)}")
    mfcc = _typed(MfccConfig, raw.get("mfcc", {}), "mfcc")
    try:
        env = EnvConfig(**env_raw, mfcc=mfcc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [env]: {exc}") from exc
    plain = {}
    for name, defaults in PLAIN_SECTIONS.items():
        given = raw.get(name, {})
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        plain[name] = {**defaults, **given}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    var_raw = {"image_size": env.image_size, "frames": mfcc.target_frames, "coefficients": mfcc.coefficient_count,
               "intent_count": env.intent_count, "seed": seed, **raw.get("var", {})}
    var_cfg = _typed(varmodel.VarConfig, var_raw, "var")
    pol_raw = {"image_size": env.image_size, "d_joint": var_cfg.d_joint, "seed": seed, **raw.get("policy", {})}
    pol_cfg = _typed(policy.PolicyConfig, pol_raw, "policy")
    ppo_cfg = _typed(policy.PpoConfig, raw.get("ppo", {}), "ppo")
    out = Path(plain["paths"]["out"])
    if not out.is_absolute() and base_dir is not None:
        out = base_dir / out
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    plain["paths"] = {**plain["paths"], "out": str(out)}
    return RunConfig(env, var_cfg, pol_cfg, ppo_cfg, plain["data"], plain["finetune"], plain["eval"],
                     plain["paths"], seed, raw)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({}, Path.cwd())
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parse_config(raw, path.parent)


def env_to_dict(cfg: EnvConfig) -> dict:
    return dataclasses.asdict(cfg)


def env_from_dict(raw: dict) -> EnvConfig:
    raw = dict(raw)
    raw["mfcc"] = MfccConfig(**raw.get("mfcc", {}))
    for key in ("color_order", "sky", "floor"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return EnvConfig(**raw)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _dirs(out: Path) -> dict[str, Path]:
    dirs = {name: out / name for name in ("checkpoints", "metrics", "reports", "frames")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _provenance(cfg: RunConfig) -> dict:
    return {"run_config": cfg.raw}


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _var_name(loss: str, centered: bool) -> str:
    return "var.ckpt" if (loss, centered) == ("supcon", True) else f"var_{loss}_{'c' if centered else 'nc'}.ckpt"


def _load_split(out: Path, split: str, env: EnvConfig) -> varmodel.PairArrays:
    try:
        pairs = dataset.read_pairs(out, split, env.mfcc)
    except dataset.DatasetError as exc:
        raise RuntimeError(f"{exc}; run gen-data first") from exc
    if not pairs or not hasattr(pairs[0], "intent"):
        raise RuntimeError(f"split {split!r} is empty or unlabeled")
    return varmodel.PairArrays.from_pairs(pairs)


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _shifted_env(out: Path) -> EnvConfig:
    path = out / "reports" / "shifted_env.json"
    if not path.exists():
        raise RuntimeError(f"{path} not found; run shift-domain first")
    return env_from_dict(json.loads(path.read_text())["env"])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise RuntimeError(f"{what} {path} not found")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> None:
    out = cfg.out
    data = cfg.data
    for split, count, seed in (("train", data["train_pairs"], data["train_seed"]),
                               ("test", data["test_pairs"], data["test_seed"])):
        pairs = envsim.collect_pairs(cfg.env, count, seed=seed, keep_wave=True)
        dataset.write_pairs(out, split, pairs)
        log.info("wrote %d %s pairs", len(pairs), split)


def cmd_train_var(cfg: RunConfig, args) -> None:
    dirs = _dirs(cfg.out)
    var_cfg = dataclasses.replace(cfg.var, loss=args.loss, centered=args.centered)
    train = _load_split(cfg.out, "train", cfg.env)
    model = varmodel.VarModel(var_cfg)
    result = varmodel.train_var(model, train, seed=cfg.seed)
    varmodel.save_var(model, dirs["checkpoints"] / _var_name(args.loss, args.centered), _provenance(cfg))
    stem = Path(_var_name(args.loss, args.centered)).stem
    with (dirs["metrics"] / f"{stem}_loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.losses, 1):
            writer.writerow([i, f"{loss:.6f}"])


def evaluate_var(model: varmodel.VarModel, train: varmodel.PairArrays, test: varmodel.PairArrays,
                 seed: int = 0) -> dict:
    """NN accuracy with training-set medoids plus linear-probe accuracies."""
    m = model.cfg.intent_count
    tr_i, tr_s = model.encode_image(train.images), model.encode_sound(train.sounds)
    te_i, te_s = model.encode_image(test.images), model.encode_sound(test.sounds)
    medoids = evalharness.compute_medoids(tr_i.v, tr_s.v, train.labels, m, centered=model.cfg.centered)
    row = evalharness.nn_accuracy(medoids, te_i.v, te_s.v, test.labels)
    row.update(evalharness.linear_probe((tr_i.h, tr_s.h, train.labels), (te_i.h, te_s.h, test.labels), m + 1,
                                        seed=seed))
    return row


def cmd_eval_var(cfg: RunConfig, args) -> None:
    dirs = _dirs(cfg.out)
    ckpt = Path(args.ckpt) if args.ckpt else dirs["checkpoints"] / "var.ckpt"
    model = varmodel.load_var(_require(ckpt, "checkpoint"))
    row = evaluate_var(model, _load_split(cfg.out, "train", cfg.env), _load_split(cfg.out, "test", cfg.env),
                       seed=cfg.seed)
    name = args.name or f"{ckpt.stem}_eval.csv"
    evalharness.write_table_csv(dirs["metrics"] / name, [row], ["NN", "LL_img", "LL_snd", "LL_avg"])


def cmd_train_rl(cfg: RunConfig, args) -> None:
    dirs = _dirs(cfg.out)
    var = varmodel.load_var(_require(Path(args.var_ckpt) if args.var_ckpt else dirs["checkpoints"] / "var.ckpt",
                                     "VAR checkpoint"))
    pol_cfg = dataclasses.replace(cfg.policy, d_joint=var.cfg.d_joint)
    stem = args.name or f"policy_{args.reward}"
    result = policy.train_rl(cfg.env, var, cfg.ppo, args.reward, seed=cfg.seed, policy_cfg=pol_cfg,
                             metrics_path=dirs["metrics"] / f"{stem}_train.csv",
                             checkpoint_dir=dirs["checkpoints"])
    policy.save_policy(result.policy, dirs["checkpoints"] / f"{stem}.ckpt", _provenance(cfg))


def cmd_eval_rl(cfg: RunConfig, args) -> None:
    dirs = _dirs(cfg.out)
    var = varmodel.load_var(_require(Path(args.var_ckpt) if args.var_ckpt else dirs["checkpoints"] / "var.ckpt",
                                     "VAR checkpoint"))
    pol_path = Path(args.policy) if args.policy else dirs["checkpoints"] / "policy_eq5.ckpt"
    net = policy.load_policy(_require(pol_path, "policy checkpoint"))
    env = _shifted_env(cfg.out) if args.shifted else cfg.env
    episodes = args.episodes or cfg.eval["episodes_per_intent"]
    actor = policy.policy_actor(net, var, greedy=cfg.eval["greedy"], seed=cfg.seed)
    if args.dump_frames:
        _dump_frames(env, actor, dirs["frames"] / pol_path.stem, cfg.seed)
    sr = policy.success_rate(actor, env, episodes, cfg.seed)
    rows = [{"intent": k, "success_rate": v} for k, v in sr["per_intent"].items()]
    rows.append({"intent": "overall", "success_rate": sr["overall"]})
    name = args.name or f"{pol_path.stem}{'_shifted' if args.shifted else ''}_eval.csv"
    evalharness.write_table_csv(dirs["metrics"] / name, rows, ["intent", "success_rate"])


def _dump_frames(env: EnvConfig, actor, folder: Path, seed: int) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    seeds = policy.eval_seeds(env.intent_count, 1, seed)

    def on_step(i, state, obs):
        pixels = np.round(obs.image * 255).astype(np.uint8)
        Image.fromarray(pixels, "RGB").save(folder / f"ep{i:02d}_t{state.t:03d}.png")

    for i, (s, g) in enumerate(seeds):
        _, obs, _ = envsim.reset(env, s, goal=g)
        Image.fromarray(np.round(obs.image * 255).astype(np.uint8), "RGB").save(folder / f"ep{i:02d}_t000.png")
    policy.run_episodes(env, actor, seeds, on_step)


def cmd_shift_domain(cfg: RunConfig, args) -> None:
    dirs = _dirs(cfg.out)
    shift_seed = args.shift_seed if args.shift_seed is not None else cfg.finetune["shift_seed"]
    shifted = envsim.shift_domain(cfg.env, shift_seed)
    _write_json(dirs["reports"] / "shifted_env.json",
                {"shift_seed": shift_seed, "env": env_to_dict(shifted), **_provenance(cfg)})


def cmd_finetune(cfg: RunConfig, args) -> None:
    dirs = _dirs(cfg.out)
    shifted = _shifted_env(cfg.out)
    ft = cfg.finetune
    pairs = args.pairs if args.pairs is not None else ft["pairs"]
    var_path = _require(Path(args.var_ckpt) if args.var_ckpt else dirs["checkpoints"] / "var.ckpt", "VAR checkpoint")
    pol_path = _require(Path(args.policy) if args.policy else dirs["checkpoints"] / "policy_eq5.ckpt",
                        "policy checkpoint")
    budget = finetune.FinetuneBudget(pairs=pairs, rl_steps=ft["rl_steps"])
    result = finetune.run_finetune(var_path, pol_path, shifted, budget, seed=cfg.seed, nominal=cfg.env,
                                   ppo=cfg.ppo, episodes_per_intent=cfg.eval["episodes_per_intent"],
                                   use_current_sound=ft["use_current_sound"], epochs=ft["epochs"],
                                   out_dir=cfg.out)
    name = args.name or "finetune"
    _write_json(dirs["reports"] / f"{name}.json", {**result.report, **_provenance(cfg)})


def cmd_report(cfg: RunConfig, args) -> None:
    """Collect on-disk metrics into ``reports/summary.json``."""
    dirs = _dirs(cfg.out)
    summary: dict = {"var": {}, "rl": {}, "finetune": {}}
    for path in sorted(dirs["metrics"].glob("*_eval.csv")):
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        if rows and "NN" in rows[0]:
            summary["var"][path.stem] = {k: float(v) for k, v in rows[0].items()}
        elif rows and "intent" in rows[0]:
            summary["rl"][path.stem] = {r["intent"]: float(r["success_rate"]) for r in rows}
    for path in sorted(dirs["reports"].glob("finetune*.json")):
        data = json.loads(path.read_text())
        summary["finetune"][path.stem] = {k: data.get(k) for k in finetune.REPORT_KEYS}
    if not any(summary.values()):
        raise RuntimeError(f"no metrics or reports found under {cfg.out}")
    _write_json(dirs["reports"] / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-var": cmd_train_var,
    "eval-var": cmd_eval_var,
    "train-rl": cmd_train_rl,
    "eval-rl": cmd_eval_rl,
    "shift-domain": cmd_shift_domain,
    "finetune": cmd_finetune,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soundsight", description="Visual-audio command following pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    common.add_argument("--seed", type=int, help="overrides the config seed")

    sub.add_parser("gen-data", parents=[common], help="collect labeled train/test pairs")
    p = sub.add_parser("train-var", parents=[common], help="train the joint representation")
    p.add_argument("--loss", choices=("supcon", "triplet"), default="supcon")
    p.add_argument("--centered", type=_bool, default=True)
    p = sub.add_parser("eval-var", parents=[common], help="nearest-medoid and linear-probe evaluation")
    p.add_argument("--ckpt")
    p.add_argument("--name")
    p = sub.add_parser("train-rl", parents=[common], help="train the policy on intrinsic rewards")
    p.add_argument("--reward", choices=policy.REWARD_MODES, default="eq5")
    p.add_argument("--var-ckpt")
    p.add_argument("--name")
    p = sub.add_parser("eval-rl", parents=[common], help="success rate of a trained policy")
    p.add_argument("--policy")
    p.add_argument("--var-ckpt")
    p.add_argument("--shifted", action="store_true", help="evaluate in the shifted domain")
    p.add_argument("--episodes", type=int)
    p.add_argument("--dump-frames", action="store_true")
    p.add_argument("--name")
    p = sub.add_parser("shift-domain", parents=[common], help="write the shifted environment description")
    p.add_argument("--shift-seed", type=int)
    p = sub.add_parser("finetune", parents=[common], help="adapt VAR and policy to the shifted domain")
    p.add_argument("--pairs", type=int)
    p.add_argument("--var-ckpt")
    p.add_argument("--policy")
    p.add_argument("--name")
    sub.add_parser("report", parents=[common], help="summarize metrics and reports on disk")
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        cfg = load_config(args.config)
        if args.out:
            cfg.paths["out"] = args.out
        if args.seed is not None:
            cfg.seed = args.seed
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("command failed", exc_info=True)
        sys.stderr.write(f"soundsight {args.command}: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
