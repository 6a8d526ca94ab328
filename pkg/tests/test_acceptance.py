"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale training
criterion trains for 3,000 generator iterations on CPU and dominates the
runtime (~20 minutes); everything else is minutes or less.

The UI-loop criterion lives with the frontend: `cd frontend && npm test`
(scripted loop against the wire-exact fake) and `tests/live.test.ts` against
a real served checkpoint (see README).
"""

import json
import os
import time

import numpy as np
import pytest

from morelike import data as dt
from morelike import engine as eg
from morelike import evaluation as ev
from morelike import generator as gn
from morelike import nn
from morelike import semantic as sm
from morelike import service as sv
from morelike import training as tr
from morelike.engine import Tape, Tensor

SPACE = sm.channel_mean_space()
DATASET_SEED = 20250810


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num} [{name}]: {status}  {detail}", flush=True)
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def tiny_cfg():
    return gn.GenConfig(
        image_size=8, n_z=8, h=8, p=2,
        read_channels=(4, 8), write_channels=(16, 8), disc_channels=(4, 8, 16),
    )


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset16(world):
    return dt.make_shapes_dataset(str(world / "shapes"), 5000, 16, seed=DATASET_SEED)


@pytest.fixture(scope="session")
def suites(world, dataset16):
    rng = np.random.default_rng(99)
    paths = dt.build_fixed_size_test_sets(
        dataset16, SPACE, [1, 2, 3, 4, 5], 200, rng, str(world / "suites")
    )
    return {k: dt.load_suite(p) for k, p in paths.items()}, paths


@pytest.fixture(scope="session")
def trained(world, dataset16):
    """Unconstrained baseline, then warm-started constrained training."""
    t0 = time.time()
    base_cfg = tr.TrainConfig(
        dataset_dir=dataset16.root,
        out_dir=str(world / "wgan"),
        iterations=1000,
        seed=2,
        checkpoint_every=1000,
        z_dist="normal",
        gamma=0.0,
    )
    _, _, base_rows, base_final = tr.train_wgan_baseline(base_cfg, dataset=dataset16)
    cfg = tr.TrainConfig(
        dataset_dir=dataset16.root,
        out_dir=str(world / "run"),
        iterations=3000,
        seed=1,
        checkpoint_every=1000,
        warm_start=base_final,
    )
    gen, disc, rows, final = tr.train(cfg, dataset=dataset16, space=SPACE)
    return {
        "final": final,
        "cfg": cfg,
        "rows": rows,
        "baseline_rows": base_rows,
        "minutes": (time.time() - t0) / 60,
    }


class TestCriterion1GradientCorrectness:
    def test_gradients(self):
        t0 = time.time()
        rng = np.random.default_rng(41)
        worst = {}

        # (a) p_S through phi, w.r.t. every image coordinate
        a_img = rng.uniform(-1, 1, (3, 8, 8))
        b_img = rng.uniform(-1, 1, (3, 8, 8))
        x = Tensor(rng.uniform(-0.5, 0.5, (3, 8, 8)), requires_grad=True)

        def f_ps(t):
            return sm.p_S(
                SPACE.embed(t), SPACE.embed(Tensor(a_img)), SPACE.embed(Tensor(b_img)), SPACE
            )

        worst["p_S.phi"] = eg.grad_check(f_ps, x, h=1e-6)

        # (b) constraint critic loss w.r.t. every image coordinate
        cs = sm.ConstraintSet(
            [
                sm.Constraint(rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-1, 1, (3, 8, 8)))
                for _ in range(4)
            ]
        )
        x2 = Tensor(rng.uniform(-0.5, 0.5, (3, 8, 8)), requires_grad=True)
        worst["critic_loss"] = eg.grad_check(
            lambda t: sm.constraint_critic_loss(t, cs, SPACE), x2, h=1e-6
        )

        # (c) gradient penalty w.r.t. discriminator weights (double backward)
        cfg = tiny_cfg()
        disc = tr.init_discriminator(cfg, np.random.default_rng(42), dtype=np.float64)
        x_r = rng.uniform(-1, 1, (4, 3, 8, 8))
        x_f = rng.uniform(-1, 1, (4, 3, 8, 8))
        eps = rng.uniform(0, 1, 4)

        def penalty_value():
            with Tape():
                pen, _ = tr.gradient_penalty(
                    lambda u: tr.discriminator_score(u, disc), x_r, x_f, eps, 10.0
                )
            return pen.item()

        gp_worst = 0.0
        for name, t in nn.named_tensors(disc).items():
            with Tape():
                pen, _ = tr.gradient_penalty(
                    lambda u: tr.discriminator_score(u, disc), x_r, x_f, eps, 10.0
                )
                (g,) = eg.grad(pen, [t])
            for _ in range(3):
                idx = tuple(rng.integers(0, s) for s in t.shape)
                h = 1e-6
                orig = t.data[idx]
                t.data[idx] = orig + h
                hi = penalty_value()
                t.data[idx] = orig - h
                lo = penalty_value()
                t.data[idx] = orig
                fd = (hi - lo) / (2 * h)
                a = float(g.data[idx])
                gp_worst = max(gp_worst, abs(a - fd) / max(1e-8, abs(a) + abs(fd)))
        worst["gradient_penalty.W"] = gp_worst

        # (d) full generator loss w.r.t. every Theta tensor (sampled coords)
        gen = gn.init_generator(cfg, np.random.default_rng(43), dtype=np.float64)
        disc64 = tr.init_discriminator(cfg, np.random.default_rng(44), dtype=np.float64)
        nn.set_requires_grad(disc64, False)
        sets = [
            sm.ConstraintSet(
                [
                    sm.Constraint(
                        rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-1, 1, (3, 8, 8))
                    )
                    for _ in range(2)
                ]
            )
            for _ in range(2)
        ]
        z = rng.uniform(-1, 1, (2, cfg.n_z))
        gamma = 10.0

        def gen_loss(_t):
            x_hat = gn.generate_batch(sets, Tensor(z), gen, cfg.p)
            score = eg.neg(eg.mean(tr.discriminator_score(x_hat, disc64)))
            emb = SPACE.embed(x_hat)
            per = []
            for i, cset in enumerate(sets):
                pos, neg = sm.set_embeddings(cset, SPACE)
                e_i = eg.reshape(eg.take_range(emb, 0, i, i + 1), (3,))
                per.append(sm.critic_loss_from_embeddings(e_i, pos, neg, SPACE))
            return eg.add(score, eg.scale(eg.mean(eg.stack(per)), gamma))

        theta_worst = 0.0
        for name, t in nn.named_tensors(gen).items():
            coords = [tuple(rng.integers(0, s) for s in t.shape) for _ in range(3)]
            err = eg.grad_check(gen_loss, t, h=1e-6, coords=coords)
            theta_worst = max(theta_worst, err)
        worst["generator_loss.Theta"] = theta_worst

        elapsed = time.time() - t0
        ok = max(worst.values()) <= 1e-4 and elapsed <= 120
        detail = (
            " ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f" elapsed={elapsed:.0f}s"
        )
        report(1, "gradient correctness", ok, detail)


class TestCriterion2OrderInvariance:
    def test_permutations(self, dataset16):
        t0 = time.time()
        cfg = gn.GenConfig()
        params = gn.init_generator(cfg, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        ids = dataset16.ids
        worst = 0.0
        for k in range(1, 11):
            for _ in range(100):
                chosen = rng.integers(0, len(ids), size=(k, 2))
                cs = sm.ConstraintSet(
                    [
                        sm.Constraint(dataset16.image(int(p)), dataset16.image(int(n)))
                        for p, n in chosen
                    ]
                )
                z_row = rng.uniform(-1, 1, cfg.n_z).astype(np.float32)
                variants = [cs] + [
                    sm.ConstraintSet([cs.constraints[i] for i in rng.permutation(k)])
                    for _ in range(20)
                ]
                z = Tensor(np.tile(z_row, (len(variants), 1)))
                with eg.no_grad():
                    out = gn.generate_batch(variants, z, params, cfg.p)
                dev = float(np.max(np.abs(out.data - out.data[0])))
                worst = max(worst, dev)

        # spot-check the single-sample path end to end as well
        for k in (1, 5, 10):
            chosen = rng.integers(0, len(ids), size=(k, 2))
            cs = sm.ConstraintSet(
                [
                    sm.Constraint(dataset16.image(int(p)), dataset16.image(int(n)))
                    for p, n in chosen
                ]
            )
            z = Tensor(rng.uniform(-1, 1, cfg.n_z).astype(np.float32))
            with eg.no_grad():
                base = gn.generate(cs, z, params, cfg.p)
                for _ in range(3):
                    perm = sm.ConstraintSet(
                        [cs.constraints[i] for i in rng.permutation(k)]
                    )
                    out = gn.generate(perm, z, params, cfg.p)
                    worst = max(worst, float(np.max(np.abs(out.data - base.data))))
        elapsed = time.time() - t0
        ok = worst <= 1e-5 and elapsed <= 120
        report(2, "order invariance", ok, f"max deviation={worst:.2e} elapsed={elapsed:.0f}s")


class TestCriterion3WganGpReduction:
    def test_reduction(self, dataset16):
        cfg0 = tr.TrainConfig(gen=tiny_cfg(), gamma=0.0, m=4, n_disc=1, iterations=1,
                              set_size=(1, 3))
        rng = np.random.default_rng(50)
        size = cfg0.gen.image_size

        def rand_sets(r):
            return [
                sm.ConstraintSet(
                    [
                        sm.Constraint(
                            r.uniform(-1, 1, (3, size, size)).astype(np.float32),
                            r.uniform(-1, 1, (3, size, size)).astype(np.float32),
                        )
                        for _ in range(2)
                    ]
                )
                for _ in range(cfg0.m)
            ]

        # loss identity at gamma = 0
        gen = gn.init_generator(cfg0.gen, np.random.default_rng(51))
        disc = tr.init_discriminator(cfg0.gen, np.random.default_rng(52))
        sets = rand_sets(np.random.default_rng(53))
        z = np.random.default_rng(54).uniform(-1, 1, (cfg0.m, cfg0.gen.n_z)).astype(np.float32)
        with eg.no_grad():
            x_hat = gn.generate_batch(sets, Tensor(z), gen, cfg0.gen.p)
            expected = -float(np.mean(tr.discriminator_score(x_hat, disc).data))
        opt = nn.Adam(nn.named_tensors(gen), cfg0.adam_alpha, cfg0.adam_beta1,
                      cfg0.adam_beta2, cfg0.adam_eps)
        stats = tr.generator_step(tr.GenBatch(sets, z), gen, disc, SPACE, cfg0, opt)
        loss_exact = stats["g_loss"] == expected

        # zero constraint-term gradient: updates identical with/without the term
        gen_a = gn.init_generator(cfg0.gen, np.random.default_rng(55))
        gen_b = gn.init_generator(cfg0.gen, np.random.default_rng(55))
        for g, use_space in ((gen_a, SPACE), (gen_b, None)):
            opt = nn.Adam(nn.named_tensors(g), cfg0.adam_alpha, cfg0.adam_beta1,
                          cfg0.adam_beta2, cfg0.adam_eps)
            tr.generator_step(tr.GenBatch(sets, z), g, disc, use_space, cfg0, opt)
        grads_zero = all(
            np.array_equal(nn.named_tensors(gen_a)[k].data, nn.named_tensors(gen_b)[k].data)
            for k in nn.named_tensors(gen_a)
        )

        # discriminator step bitwise-independent of gamma
        disc_updates = []
        for gamma in (0.0, 10.0):
            cfg = tr.TrainConfig(gen=tiny_cfg(), gamma=gamma, m=4, n_disc=1,
                                 iterations=1, set_size=(1, 3))
            g = gn.init_generator(cfg.gen, np.random.default_rng(56))
            d = tr.init_discriminator(cfg.gen, np.random.default_rng(57))
            opt = nn.Adam(nn.named_tensors(d), cfg.adam_alpha, cfg.adam_beta1,
                          cfg.adam_beta2, cfg.adam_eps)
            r = np.random.default_rng(58)
            batch = tr.DiscBatch(
                x_real=r.uniform(-1, 1, (cfg.m, 3, size, size)).astype(np.float32),
                sets=rand_sets(r),
                z=r.uniform(-1, 1, (cfg.m, cfg.gen.n_z)).astype(np.float32),
                eps=r.uniform(0, 1, cfg.m).astype(np.float32),
            )
            tr.discriminator_step(batch, g, d, cfg, opt)
            disc_updates.append({k: t.data.copy() for k, t in nn.named_tensors(d).items()})
        disc_bitwise = all(
            np.array_equal(disc_updates[0][k], disc_updates[1][k]) for k in disc_updates[0]
        )

        ok = loss_exact and grads_zero and disc_bitwise
        report(
            3, "wgan-gp reduction", ok,
            f"loss_exact={loss_exact} constraint_grad_zero={grads_zero} "
            f"disc_gamma_independent={disc_bitwise}",
        )


class TestCriterion4DeskScaleTraining:
    def test_training_mcse(self, world, dataset16, suites, trained):
        loaded, paths = suites
        report_obj = ev.mcse(
            trained["final"], list(paths.values()), trials=10, seed=5,
            dataset=dataset16, space=SPACE,
        )
        avg = float(np.mean([r.mcse_mean for r in report_obj.per_k]))
        out_json = ev.emit_report(report_obj, str(world / "report.json"), "json")
        out_csv = ev.emit_report(report_obj, str(world / "report.csv"), "csv")
        table = ev.format_table(report_obj)
        print("\n" + table)
        per_k = " ".join(f"k{r.k}={r.mcse_mean:.3f}" for r in report_obj.per_k)
        # the convergence signal on both shapes runs: windowed Wasserstein
        # estimate trends downward
        def trends_down(rows):
            w = [r["w_estimate"] for r in rows]
            win = max(1, len(w) // 10)
            return float(np.mean(w[-win:])) < float(np.mean(w[:win]))

        w_trend_down = trends_down(trained["rows"]) and trends_down(
            trained["baseline_rows"]
        )
        ok = (
            avg <= 0.25
            and trained["minutes"] <= 60
            and w_trend_down
            and os.path.isfile(out_json)
            and os.path.isfile(out_csv)
        )
        report(
            4, "desk-scale training", ok,
            f"avg_mcse={avg:.4f} ({per_k}) train={trained['minutes']:.1f}min "
            f"w_trend_down={w_trend_down}",
        )


class TestCriterion5TripletPhi:
    def test_triplet_phi(self, dataset16):
        t0 = time.time()
        train_ids, test_ids = dataset16.split()
        rng = np.random.default_rng(31)
        train_trips = sm.sample_color_triplets(dataset16, 20000, rng, ids=train_ids)
        test_trips = sm.sample_color_triplets(dataset16, 4000, rng, ids=test_ids)
        cfg = sm.TripletPhiConfig(seed=0)
        space, rep = sm.train_triplet_phi(dataset16.images(), train_trips, cfg, test_trips)
        minutes = (time.time() - t0) / 60
        ok = rep["holdout_satisfaction"] >= 0.90 and minutes <= 10
        report(
            5, "triplet phi", ok,
            f"holdout={rep['holdout_satisfaction']:.4f} time={minutes:.1f}min "
            f"(paper analog 0.94504)",
        )


class TestCriterion6SamplerSoundness:
    def test_sampler(self, dataset16):
        rng = np.random.default_rng(60)
        sampler = dt.ConstraintSampler(dataset16, SPACE)
        bins = dataset16.dominant_bins()
        emb = {i: sampler._emb[i] for i in sampler.ids}
        n_total = 10_000
        violations = 0
        focused_checked = 0
        focused_violations = 0
        for i in range(n_total):
            mode = "uniform" if i % 2 == 0 else "bin_focused"
            s = sampler.sample((1, 10), mode, rng)
            ref = emb[s.reference_id]
            for p, n in s.pairs:
                dp = float(((emb[p] - ref) ** 2).sum())
                dn = float(((emb[n] - ref) ** 2).sum())
                if not dp < dn:
                    violations += 1
            if s.focused_bin is not None:
                focused_checked += 1
                if bins[s.reference_id] != s.focused_bin:
                    focused_violations += 1
                for p, n in s.pairs:
                    if bins[p] != s.focused_bin or bins[n] == s.focused_bin:
                        focused_violations += 1
        # spot-check the predicate on real decoded images too
        for _ in range(50):
            s = sampler.sample((1, 10), "uniform", rng)
            cs = dt.to_constraint_set(dataset16, s)
            ref_img = dataset16.image(s.reference_id)
            if not all(sm.satisfies(ref_img, c, SPACE) for c in cs):
                violations += 1
        ok = violations == 0 and focused_violations == 0 and focused_checked > 1000
        report(
            6, "sampler soundness", ok,
            f"sets={n_total} violations={violations} focused={focused_checked} "
            f"focused_violations={focused_violations}",
        )


class TestCriterion7DeterminismPersistence:
    def test_determinism(self, world, dataset16, monkeypatch):
        shapes8 = dt.make_shapes_dataset(str(world / "shapes8"), 80, 8, seed=4)
        outputs = []
        for tag in ("da", "db"):
            run_dir = world / tag
            run_dir.mkdir()
            monkeypatch.chdir(run_dir)
            cfg = tr.TrainConfig(
                gen=tiny_cfg(), m=4, n_disc=2, iterations=10, seed=77,
                checkpoint_every=5, set_size=(1, 3),
                dataset_dir=shapes8.root, out_dir="run",
            )
            tr.train(cfg, dataset=shapes8, space=SPACE)
            outputs.append(
                (
                    open(run_dir / "run" / "metrics.jsonl").read(),
                    open(run_dir / "run" / "final" / "manifest.json").read(),
                    open(run_dir / "run" / "final" / "weights.bin", "rb").read(),
                )
            )
        runs_identical = outputs[0] == outputs[1]

        # checkpoint round trip byte identity
        from morelike.checkpoint import load_checkpoint, save_checkpoint

        src = str(world / "da" / "run" / "final")
        ck = load_checkpoint(src)
        dup = str(world / "ckdup")
        save_checkpoint(dup, ck.arrays, ck.config, ck.iteration, ck.rng_state,
                        ck.kind, ck.extra)
        roundtrip = (
            open(os.path.join(src, "manifest.json")).read()
            == open(os.path.join(dup, "manifest.json")).read()
            and open(os.path.join(src, "weights.bin"), "rb").read()
            == open(os.path.join(dup, "weights.bin"), "rb").read()
        )

        # session replay reproduces outputs bit-for-bit
        svc_dir = str(world / "svc")
        app = sv.create_app(str(world / "da" / "run"), shapes8.root, svc_dir)
        service = app.state.service
        session = service.create_session("final", n_seeds=3, rng_seed=13)
        service.add_constraint(session.id, {"dataset": 0}, {"dataset": 1})
        service.add_constraint(session.id, {"dataset": 2}, {"previous_output": 1})
        service.undo(session.id)
        service.add_constraint(session.id, {"dataset": 3}, {"dataset": 4})
        live = [o.copy() for o in session.outputs]
        log_path = service.persist_session(session.id)
        app2 = sv.create_app(str(world / "da" / "run"), shapes8.root, str(world / "svc2"))
        replayed = app2.state.service.replay_session(log_path)
        replay_ok = all(np.array_equal(a, b) for a, b in zip(live, replayed.outputs))

        ok = runs_identical and roundtrip and replay_ok
        report(
            7, "determinism and persistence", ok,
            f"runs_identical={runs_identical} ckpt_roundtrip={roundtrip} replay={replay_ok}",
        )


class TestCriterion8ChanceLevel:
    def test_untrained_mcse(self, dataset16, suites):
        loaded, _ = suites
        cfg = gn.GenConfig()
        gen_params = gn.init_generator(cfg, np.random.default_rng(123))

        def untrained_fn(sampled, rng_):
            cs = dt.to_constraint_set(dataset16, sampled)
            z = Tensor(tr.sample_z(rng_, (cfg.n_z,), "uniform"))
            with eg.no_grad():
                return gn.generate(cs, z, gen_params, cfg.p).data

        rows = ev.mcse_from_fn(untrained_fn, loaded, dataset16, SPACE, trials=10, seed=5)
        # binomial bound over the independent unit: the 200 sampled sets per
        # suite (z-trials reuse the same sets, so they are not independent)
        band = 3 * 0.5 / np.sqrt(rows[0].n_sets)
        deviations = {r.k: abs(r.mcse_mean - 0.5) for r in rows}
        ok = all(d <= band for d in deviations.values())
        detail = " ".join(f"k{k}={loaded and rows[i].mcse_mean:.3f}"
                          for i, k in enumerate(sorted(deviations)))
        report(
            8, "chance-level oracle", ok,
            f"{detail} band=0.5±{band:.3f}",
        )
