"""Run the frozen two-task merging experiment and write all of its artifacts.

The recipe below is pinned: a reverse-string specialist is finetuned into a
second base on a modular-addition curriculum that rehearses reverse samples,
and the two checkpoints are then merged three ways (fixed-ratio sweep, learned
per-unit ratios, and the L1-shrunk variant). Every number this script prints
is deterministic, and `--freeze` records the headline values as the expected
results checked by the test suite.

Usage:
    python3 scripts/golden_run.py --out runs/golden [--jobs 3] [--freeze]
"""
import argparse
import json
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from soupkit import bench as B
from soupkit import data as D
from soupkit import model as M
from soupkit import report as R
from soupkit import soup as S
from soupkit.ioutil import atomic_write_text

MODEL = dict(d_model=64, n_layers=2, n_heads=4, d_ff=128, vocab_size=64, max_seq_len=64)
ANCESTOR_SEED = 20260822

REVERSE = dict(seed=101, n_train=512, n_eval=128, len_range=(3, 6))
MODADD = dict(seed=202, n_train=1800, n_eval=128, modulus=47)

# Task B is a curriculum, not a pure task: every modadd training sample plus a
# rehearsal draw of reverse samples, so the second finetune keeps the first
# skill alive while it acquires the new one.  Its eval split mirrors that mix.
BLEND_DRAW_SEED = 515
REHEARSAL_COUNT = 900
BLEND_EVAL_REVERSE = 32
BLEND_EVAL_MODADD = 96

BASE1_TRAIN = dict(learning_rate=3e-3, epochs=60, batch_size=16, seed=11)
BASE2_TRAIN = dict(learning_rate=3e-3, epochs=40, batch_size=16, seed=12)

DEV_COMPONENTS = (("reverse", 50), ("blend", 50))
DEV_SEED = 33
SOUP_TRAIN = dict(learning_rate=0.1, epochs=3, activation="softmax", lambda_l1=0.0, batch_size=8, seed=33)
SHRINK_LAMBDAS = (0.0, 1e-4, 1e-3, 1e-2)

GRID_EPOCHS = (1, 2, 3, 4, 5)
GRID_LRS = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3)
GRID_ACTIVATIONS = ("softmax", "sigmoid")
GRID_SEED = 424242


def build_tasks():
    rev = D.gen_task_reverse(**REVERSE)
    mod = D.gen_task_modadd(**MODADD)
    rng = np.random.default_rng(BLEND_DRAW_SEED)
    picks = rng.permutation(len(rev.train))[:REHEARSAL_COUNT]
    rows = [rev.train[int(i)] for i in picks] + list(mod.train)
    order = rng.permutation(len(rows))
    blend = D.MetaSet(
        name="blend",
        train=[rows[int(i)] for i in order],
        eval=list(rev.eval[:BLEND_EVAL_REVERSE]) + list(mod.eval[:BLEND_EVAL_MODADD]),
    )
    return rev, mod, blend


def train_bases(rev, blend):
    ancestor = M.init_ancestor(M.ModelConfig(**MODEL), seed=ANCESTOR_SEED)
    base1, _ = M.train_weights(
        ancestor, D.rows_from_samples(rev.train), M.TrainConfig(**BASE1_TRAIN), tag="reverse", pad_id=D.PAD_ID
    )
    base2, _ = M.train_weights(
        base1, D.rows_from_samples(blend.train), M.TrainConfig(**BASE2_TRAIN), tag="blend", pad_id=D.PAD_ID
    )
    return base1, base2


def dev_rows(sets):
    return D.mix(sets, D.MixSpec(components=DEV_COMPONENTS, seed=DEV_SEED))


def train_soup(base1, base2, dev):
    alpha_set, steps = S.train_alpha(base1, base2, dev, S.SoupTrainConfig(**SOUP_TRAIN), D.PAD_ID)
    return alpha_set, steps


def grid_spec():
    return B.GridSpec(
        train_specs=(DEV_COMPONENTS,),
        epochs=GRID_EPOCHS,
        learning_rates=GRID_LRS,
        activations=GRID_ACTIVATIONS,
        lambdas=(0.0,),
    )


def ems(ckpt, rev, blend):
    return {
        "reverse": B.evaluate(ckpt, rev).exact_match,
        "blend": B.evaluate(ckpt, blend).exact_match,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/golden", help="artifact directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for the grid")
    parser.add_argument("--freeze", action="store_true", help="also write tests/golden/golden_expected.json")
    args = parser.parse_args(argv)

    t0 = time.perf_counter()

    def say(msg):
        print(f"[{time.perf_counter() - t0:7.1f}s] {msg}", flush=True)

    os.makedirs(args.out, exist_ok=True)
    rev, mod, blend = build_tasks()
    sets = {"reverse": rev, "blend": blend}
    say(f"tasks: reverse {len(rev.train)}/{len(rev.eval)}, modadd {len(mod.train)}/{len(mod.eval)}, "
        f"blend {len(blend.train)}/{len(blend.eval)}")

    base1, base2 = train_bases(rev, blend)
    M.save_checkpoint(base1, os.path.join(args.out, "base1.ckpt"))
    M.save_checkpoint(base2, os.path.join(args.out, "base2.ckpt"))
    b1 = ems(base1, rev, blend)
    b2 = ems(base2, rev, blend)
    b1_mod = B.evaluate(base1, mod).exact_match
    b2_mod = B.evaluate(base2, mod).exact_match
    say(f"base1: reverse={b1['reverse']:.4f} blend={b1['blend']:.4f} (modadd {b1_mod:.4f})")
    say(f"base2: reverse={b2['reverse']:.4f} blend={b2['blend']:.4f} (modadd {b2_mod:.4f})")

    vanilla = B.run_vanilla_sweep(base1, base2, [rev, blend])
    B.save_records_csv(vanilla, os.path.join(args.out, "vanilla_records.csv"), eval_order=["reverse", "blend"])
    R.vanilla_curve_svg(vanilla, "reverse", os.path.join(args.out, "vanilla_reverse.svg"))
    R.vanilla_curve_svg(vanilla, "blend", os.path.join(args.out, "vanilla_blend.svg"))
    combined = [r.metrics["reverse"].exact_match + r.metrics["blend"].exact_match for r in vanilla]
    say("vanilla combined: " + " ".join(f"{c:.3f}" for c in combined))

    dev = dev_rows(sets)
    alpha_set, _ = train_soup(base1, base2, dev)
    S.save_alpha_csv(alpha_set, os.path.join(args.out, "alpha_softmax.csv"))
    souped = S.apply_alpha(base1, base2, alpha_set)
    M.save_checkpoint(souped, os.path.join(args.out, "soup.ckpt"))
    soup = ems(souped, rev, blend)
    say(f"soup:  reverse={soup['reverse']:.4f} blend={soup['blend']:.4f} "
        f"combined={soup['reverse'] + soup['blend']:.4f}")

    shrink = {}
    shrink_sets = {}
    for lam in SHRINK_LAMBDAS:
        cfg = S.SoupTrainConfig(
            learning_rate=SOUP_TRAIN["learning_rate"],
            epochs=SOUP_TRAIN["epochs"],
            activation="sigmoid",
            lambda_l1=lam,
            batch_size=SOUP_TRAIN["batch_size"],
            seed=SOUP_TRAIN["seed"],
        )
        aset, _ = S.train_alpha(base1, base2, dev, cfg, D.PAD_ID)
        shrink_sets[lam] = aset
        raws = np.concatenate([np.atleast_1d(v) for v in aset.raw.values()])
        pairs = aset.pairs()
        shrink[lam] = {
            "mean_abs_raw": float(np.abs(raws).mean()),
            "dominant_units": int(sum(1 for a1, _ in pairs.values() if a1 > 0.5)),
            "soup": ems(S.apply_alpha(base1, base2, aset), rev, blend),
        }
        S.save_alpha_csv(aset, os.path.join(args.out, f"alpha_sigmoid_l1_{lam:g}.csv"))
        say(f"sigmoid l1={lam:g}: mean|raw|={shrink[lam]['mean_abs_raw']:.6f} "
            f"dominant={shrink[lam]['dominant_units']}/21")
    pairs0 = shrink_sets[0.0].pairs()
    pairs4 = shrink_sets[1e-4].pairs()
    agreement = sum(
        (pairs0[u][0] > 0.5) == (pairs4[u][0] > 0.5) for u in pairs0
    ) / len(pairs0)
    say(f"dominance agreement l1=0 vs 1e-4: {agreement:.4f}")
    for kind in ("attn_q", "mlp_up"):
        R.alpha_strip_svg(
            {"plain": shrink_sets[0.0], "shrunk": shrink_sets[1e-3]},
            kind,
            os.path.join(args.out, f"alpha_strip_{kind}.svg"),
        )

    say(f"grid: 60 points, jobs={args.jobs}")
    records = B.run_grid(base1, base2, grid_spec(), sets, ["reverse", "blend"], GRID_SEED, jobs=args.jobs)
    B.save_records_csv(records, os.path.join(args.out, "grid_records.csv"), eval_order=["reverse", "blend"])
    table = B.summarize(records)
    B.save_summary_csv(table, os.path.join(args.out, "grid_summary.csv"))
    R.summary_table_svg(table, os.path.join(args.out, "grid_summary.svg"))
    softmax_records = [r for r in records if r.activation == "softmax"]
    R.grid_heatmap_svg(softmax_records, "blend", os.path.join(args.out, "grid_heatmap_blend.svg"))
    best_cfg, _ = B.select_best(records)
    best_score = max(B.record_score(r) for r in records if not r.failed and r.epochs is not None)
    say(f"grid best: epochs={best_cfg.epochs} lr={best_cfg.learning_rate:g} "
        f"activation={best_cfg.activation} score={best_score:.4f}")

    expected = {
        "base1": b1,
        "base2": b2,
        "base1_modadd": b1_mod,
        "base2_modadd": b2_mod,
        "soup": soup,
        "vanilla_combined": combined,
        "shrink": {f"{lam:g}": v for lam, v in shrink.items()},
        "dominance_agreement": agreement,
        "grid_best": {
            "epochs": best_cfg.epochs,
            "learning_rate": best_cfg.learning_rate,
            "activation": best_cfg.activation,
            "score": best_score,
        },
    }
    blob = json.dumps(expected, indent=2) + "\n"
    atomic_write_text(os.path.join(args.out, "golden_expected.json"), blob)
    if args.freeze:
        target = os.path.join(
            os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "tests", "golden", "golden_expected.json"
        )
        os.makedirs(os.path.dirname(target), exist_ok=True)
        atomic_write_text(target, blob)
        say(f"froze expectations to {target}")
    say("done")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
