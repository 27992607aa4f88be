import math
from dataclasses import replace

import numpy as np
import pytest

from attacklab import tensor as T
from attacklab.attack import (
    AttackConfig, AttackDeps, LossBreakdown, estimate_gradient_rgf, pgd_step,
    run_ablation, run_attack, run_baseline, run_instructta, run_noise_control,
    write_trace_jsonl,
)
from attacklab.encoders import TextEncoder
from attacklab.errors import ConfigError, ContractError, NonFiniteError
from attacklab.evaluation import draw_benchmark_samples
from attacklab.imaging import Gallery, GalleryEntry, Image
from attacklab.instructions import OfflineProvider
from attacklab.rng import SplitMix64


def small_cfg(**kw):
    base = dict(iterations=5, seed=0)
    base.update(kw)
    return AttackConfig(**base)


def random_image(seed, size=32):
    return Image(np.random.default_rng(seed).uniform(0.1, 0.9, (size, size, 3)))


@pytest.fixture(scope="module")
def sample(lab0):
    return draw_benchmark_samples(lab0.victim, lab0.gallery,
                                  lab0.real_instructions, lab0.judge,
                                  count=1, seed=3)[0]


class TestAttackConfig:
    def test_defaults_are_toy_defaults(self):
        cfg = AttackConfig()
        assert (cfg.epsilon, cfg.eta, cfg.iterations, cfg.n_instructions) == \
            (8.0, 1.0, 100, 10)
        assert cfg.epsilon_pixels == 8.0 / 255
        assert cfg.eta_pixels == 1.0 / 255

    def test_validation(self):
        with pytest.raises(ConfigError):
            AttackConfig(epsilon=-1)
        with pytest.raises(ConfigError):
            AttackConfig(iterations=-1)
        with pytest.raises(ConfigError):
            AttackConfig(eta=0.0, iterations=5)
        with pytest.raises(ConfigError):
            AttackConfig(loss_mode="nonsense")
        with pytest.raises(ConfigError):
            AttackConfig(n_instructions=0)
        # eta is unconstrained when no steps are taken
        AttackConfig(eta=0.0, iterations=0)


class TestLossBreakdown:
    def test_identity_enforced(self):
        with pytest.raises(ContractError):
            LossBreakdown(j_ins=1.0, j_mf=0.5, mf_weight=1.0, total=1.0)

    def test_identity_bitwise_over_random_values(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            j_ins, j_mf, w = rng.normal(size=3)
            b = LossBreakdown(j_ins=j_ins, j_mf=j_mf, mf_weight=w,
                              total=j_ins - w * j_mf)
            assert b.total == j_ins - w * j_mf


class TestPgdStep:
    def test_zero_budget_returns_base_bitwise(self):
        x = random_image(0)
        x_adv = random_image(1)
        grad = T.Tensor(np.random.default_rng(2).normal(size=(32, 32, 3)))
        out = pgd_step(x_adv, grad, x, small_cfg(epsilon=0.0))
        assert np.array_equal(out.pixels, x.pixels)

    def test_positive_grad_descends_exactly_one_unit(self):
        px = np.random.default_rng(3).uniform(0, 0.9, (32, 32, 3))
        px[0, 0, 0] = 0.0  # pixel at the floor clamps to 0
        x = Image(px)
        grad = T.Tensor(np.ones((32, 32, 3)))
        out = pgd_step(x, grad, x, small_cfg(epsilon=8.0, eta=1.0))
        expected = np.maximum(px - 1.0 / 255, 0.0)
        assert np.allclose(out.pixels, expected, atol=1e-15)
        assert out.pixels[0, 0, 0] == 0.0

    def test_zero_gradient_is_fixed_point(self):
        x = random_image(4)
        zero = T.Tensor(np.zeros((32, 32, 3)))
        one = pgd_step(x, zero, x, small_cfg())
        two = pgd_step(one, zero, x, small_cfg())
        assert np.array_equal(two.pixels, x.pixels)

    def test_random_steps_respect_constraints(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            cfg = small_cfg(epsilon=float(rng.integers(0, 17)),
                            eta=float(rng.uniform(0.25, 4.0)))
            x = random_image(trial)
            x_adv = x
            for _ in range(4):
                grad = T.Tensor(rng.normal(size=(32, 32, 3)))
                x_adv = pgd_step(x_adv, grad, x, cfg)
                linf = np.abs(x_adv.pixels - x.pixels).max()
                assert linf <= cfg.epsilon_pixels + 1e-12
                assert x_adv.pixels.min() >= 0.0 and x_adv.pixels.max() <= 1.0


class TestFixedPoints:
    def test_zero_iterations_identity_bitwise(self, lab0, sample):
        res = run_attack(sample.image, sample.target_text, lab0.deps,
                         small_cfg(iterations=0))
        assert np.array_equal(res.adversarial.pixels, sample.image.pixels)
        assert res.trace == ()

    def test_zero_epsilon_identity_bitwise(self, lab0, sample):
        res = run_attack(sample.image, sample.target_text, lab0.deps,
                         small_cfg(epsilon=0.0, iterations=3))
        assert np.array_equal(res.adversarial.pixels, sample.image.pixels)

    def test_target_equals_input_womfg_identity(self, lab0):
        x = random_image(11)
        target_text = "the exact fixture caption"
        gallery = Gallery(
            [GalleryEntry(target_text, "mem0"),
             GalleryEntry("a completely different description", "mem1")],
            [x, random_image(12)], lab0.surrogate.text, image_size=32)
        deps = AttackDeps(surrogate=lab0.surrogate, align=lab0.align,
                          gallery=gallery, provider=OfflineProvider(0))
        res = run_attack(x, target_text, deps,
                         small_cfg(loss_mode="womfg", iterations=4))
        assert res.trace[0].loss.j_ins == 0.0
        assert res.trace[0].loss.total == 0.0
        assert np.array_equal(res.adversarial.pixels, x.pixels)


class TestModes:
    def test_instructta_calls_infer_and_rephrase(self, lab0, sample):
        provider = OfflineProvider(0)
        deps = replace_provider(lab0.deps, provider)
        run_attack(sample.image, sample.target_text, deps, small_cfg())
        assert provider.call_count == 2

    def test_womfg_calls_provider_once(self, lab0, sample):
        provider = OfflineProvider(0)
        deps = replace_provider(lab0.deps, provider)
        run_attack(sample.image, sample.target_text, deps,
                   small_cfg(loss_mode="womfg"))
        assert provider.call_count == 1

    def test_womf_records_jmf_but_excludes_it(self, lab0, sample):
        res = run_attack(sample.image, sample.target_text, lab0.deps,
                         small_cfg(loss_mode="womf"))
        for rec in res.trace:
            assert rec.loss.j_mf != 0.0
            assert rec.loss.mf_weight == 0.0
            assert rec.loss.total == rec.loss.j_ins

    def test_instructta_total_is_dual_loss(self, lab0, sample):
        res = run_attack(sample.image, sample.target_text, lab0.deps,
                         small_cfg(mf_weight=0.7))
        for rec in res.trace:
            assert rec.loss.total == rec.loss.j_ins - 0.7 * rec.loss.j_mf
            assert rec.linf <= res.config.epsilon_pixels + 1e-12

    def test_mfit_zero_epsilon_identity(self, lab0, sample):
        res = run_baseline("mfit", sample.image, sample.target_text,
                           lab0.deps, small_cfg(epsilon=0.0))
        assert np.array_equal(res.adversarial.pixels, sample.image.pixels)

    def test_mfii_self_target_stays_near_identity(self, lab0):
        # when the retrieved target image is the input itself, the
        # objective starts at its maximum (cosine 1)
        x = lab0.gallery.images[0]
        caption = lab0.gallery.entries[0].caption
        res = run_baseline("mfii", x, caption, lab0.deps,
                           small_cfg(loss_mode="mfii", iterations=4))
        assert res.trace[0].loss.j_mf == pytest.approx(1.0, abs=1e-9)
        assert res.trace[-1].loss.j_mf >= 0.99
        assert np.abs(res.adversarial.pixels - x.pixels).max() <= \
            res.config.epsilon_pixels + 1e-12

    def test_mftt_requires_victim(self, lab0, sample):
        deps = AttackDeps(surrogate=lab0.surrogate, align=lab0.align,
                          gallery=lab0.gallery, provider=OfflineProvider(0),
                          victim=None)
        with pytest.raises(ConfigError):
            run_baseline("mftt", sample.image, sample.target_text, deps,
                         small_cfg(loss_mode="mftt"))

    def test_mftt_runs_and_respects_constraints(self, lab0, sample):
        res = run_baseline("mftt", sample.image, sample.target_text,
                           lab0.deps, small_cfg(loss_mode="mftt",
                                                iterations=3, mftt_queries=4))
        assert len(res.trace) == 3
        assert np.abs(res.adversarial.pixels - sample.image.pixels).max() <= \
            res.config.epsilon_pixels + 1e-12

    def test_wrapper_kind_validation(self, lab0, sample):
        with pytest.raises(ConfigError):
            run_baseline("womf", sample.image, sample.target_text,
                         lab0.deps, small_cfg())
        with pytest.raises(ConfigError):
            run_ablation("mfit", sample.image, sample.target_text,
                         lab0.deps, small_cfg())


def replace_provider(deps, provider):
    return AttackDeps(surrogate=deps.surrogate, align=deps.align,
                      gallery=deps.gallery, provider=provider,
                      victim=deps.victim)


class TestLossSemantics:
    def test_j_ins_zero_for_identical_inputs_and_instructions(self, lab0):
        m = lab0.surrogate
        x = random_image(20).to_tensor()
        p = "Could you explain the key elements of this picture to me?"
        val = T.l2_dist_sq(m.features(x, p), m.features(x, p)).item()
        assert val == 0.0

    def test_j_ins_symmetry_under_swap(self, lab0):
        m = lab0.surrogate
        xa, xb = random_image(21).to_tensor(), random_image(22).to_tensor()
        pa = "What does this picture represent?"
        pb = "Provide a description of the image below."
        ab = T.l2_dist_sq(m.features(xa, pa), m.features(xb, pb)).item()
        ba = T.l2_dist_sq(m.features(xb, pb), m.features(xa, pa)).item()
        assert ab == ba

    def test_j_ins_matches_independent_oracle(self, lab0):
        m = lab0.surrogate
        xa, xb = random_image(23).to_tensor(), random_image(24).to_tensor()
        pa = pb = "Examine the picture thoroughly and with attention to detail."
        val = T.l2_dist_sq(m.features(xa, pa), m.features(xb, pb)).item()
        fa, fb = m.features(xa, pa).data, m.features(xb, pb).data
        oracle = float(sum((ai - bi) ** 2 for ai, bi in zip(fa, fb)))
        assert math.isclose(val, oracle, rel_tol=1e-12)

    def test_j_mf_in_unit_range_and_matches_oracle(self, lab0):
        align = lab0.align
        x = random_image(25).to_tensor()
        y_t = "A snowy mountain peak above the clouds."
        val = T.dot(align.image_embedding(x), align.text_embedding(y_t)).item()
        assert -1.0 <= val <= 1.0
        oracle = float(align.image_embedding(x).data
                       @ align.text_embedding(y_t).data)
        assert math.isclose(val, oracle, rel_tol=1e-12)

    def test_identical_unit_vectors_score_one(self, lab0):
        e = lab0.align.text_embedding("A stone castle overlooking the valley.")
        assert T.dot(e, e).item() == pytest.approx(1.0, abs=1e-9)


class TestDeterminism:
    @pytest.mark.parametrize("mode", ["instructta", "womf", "womfg",
                                      "mfit", "mfii", "mftt"])
    def test_bitwise_identical_reruns(self, lab0, sample, mode):
        cfg = small_cfg(loss_mode=mode, iterations=3, mftt_queries=2)
        a = run_attack(sample.image, sample.target_text, lab0.deps, cfg)
        b = run_attack(sample.image, sample.target_text, lab0.deps, cfg)
        assert np.array_equal(a.adversarial.pixels, b.adversarial.pixels)
        assert a.trace == b.trace

    def test_different_seeds_diverge(self, lab0, sample):
        a = run_attack(sample.image, sample.target_text, lab0.deps,
                       small_cfg(seed=0, iterations=8))
        b = run_attack(sample.image, sample.target_text, lab0.deps,
                       small_cfg(seed=1, iterations=8))
        assert not np.array_equal(a.adversarial.pixels, b.adversarial.pixels)


class TestDescent:
    def test_j_ins_decreases_on_short_runs(self, lab0, sample):
        wins = 0
        for seed in range(5):
            res = run_instructta(sample.image, sample.target_text, lab0.deps,
                                 small_cfg(seed=seed, iterations=25))
            if res.trace[-1].loss.j_ins < res.trace[0].loss.j_ins:
                wins += 1
        assert wins >= 4


class TestMonotoneBudget:
    def test_mean_final_j_ins_drops_with_budget(self, lab0):
        """Over >= 30 seeded toy runs, the mean final feature distance at
        a 16/255 budget is no larger than at 4/255."""
        samples = draw_benchmark_samples(lab0.victim, lab0.gallery,
                                         lab0.real_instructions, lab0.judge,
                                         count=6, seed=9)
        finals = {4.0: [], 16.0: []}
        for eps in finals:
            for run in range(30):
                s = samples[run % len(samples)]
                res = run_attack(s.image, s.target_text, lab0.deps,
                                 small_cfg(epsilon=eps, iterations=30,
                                           seed=run))
                finals[eps].append(res.trace[-1].loss.j_ins)
        assert np.mean(finals[16.0]) <= np.mean(finals[4.0])


class TestPairSampling:
    def test_multi_pair_averaging_runs_and_differs(self, lab0, sample):
        one = run_attack(sample.image, sample.target_text, lab0.deps,
                         small_cfg(pair_samples=1, iterations=6))
        four = run_attack(sample.image, sample.target_text, lab0.deps,
                          small_cfg(pair_samples=4, iterations=6))
        assert len(four.trace) == 6
        assert four.trace[0].loss.pair is not None
        assert not np.array_equal(one.adversarial.pixels,
                                  four.adversarial.pixels)


class TestRgfEstimator:
    def test_quadratic_alignment(self):
        center = np.random.default_rng(1).normal(size=(6, 6, 3))

        def objective(z):
            return -float(((z - center) ** 2).sum())

        point = np.random.default_rng(2).normal(size=(6, 6, 3))
        est = estimate_gradient_rgf(objective, point, queries=64,
                                    sigma=1e-3, rng=SplitMix64(7))
        true = -2.0 * (point - center)
        cos = float((est * true).sum()
                    / (np.linalg.norm(est) * np.linalg.norm(true)))
        assert cos > 0.5


class TestNoiseControl:
    def test_within_budget_and_deterministic(self):
        x = random_image(30)
        cfg = small_cfg(epsilon=8.0)
        a = run_noise_control(x, cfg)
        b = run_noise_control(x, cfg)
        assert np.array_equal(a.adversarial.pixels, b.adversarial.pixels)
        assert np.abs(a.adversarial.pixels - x.pixels).max() <= cfg.epsilon_pixels
        assert not np.array_equal(a.adversarial.pixels, x.pixels)


class TestNonFiniteAbort:
    @pytest.mark.filterwarnings("ignore:overflow")
    def test_huge_features_abort_with_iteration_context(self, lab0):
        class HugeSurrogate:
            image_size = 32

            def features(self, x, instruction):
                return T.scale(T.reshape(T.tsum(x), (1,)), 1e200)

        deps = AttackDeps(surrogate=HugeSurrogate(), align=lab0.align,
                          gallery=lab0.gallery, provider=OfflineProvider(0))
        with pytest.raises(NonFiniteError, match="iteration 1"):
            run_attack(random_image(31), "anything at all", deps,
                       small_cfg(loss_mode="womfg", iterations=2))


class TestTraceExport:
    def test_jsonl_schema_and_determinism(self, lab0, sample, tmp_path):
        import json

        res = run_attack(sample.image, sample.target_text, lab0.deps,
                         small_cfg(iterations=4))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_trace_jsonl(res, p1)
        write_trace_jsonl(res, p2)
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().splitlines()
        assert len(lines) == 4
        rec = json.loads(lines[0])
        assert list(rec) == ["iter", "j_ins", "j_mf", "total", "linf"]
