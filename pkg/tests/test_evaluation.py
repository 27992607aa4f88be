import numpy as np
import pytest

from attacklab import tensor as T
from attacklab.attack import AttackConfig
from attacklab.encoders import TextEncoder
from attacklab.errors import ConfigError, ContractError, JudgeFormatError
from attacklab.evaluation import (
    AuditFixture, BenchContext, EvalReport, OfflineJudge, RemoteJudge,
    SampleRecord, ToyVictim, build_audit_fixtures, build_text_ensemble,
    clip_score, draw_benchmark_samples, enumerate_usable_pairs,
    instruction_audit, judge_success, perceptual_report, run_benchmark,
    shuffle_instructions, sweep, write_report_csv, write_report_json,
)
from attacklab.imaging import Image
from attacklab.instructions import OfflineProvider


def random_image(seed, size=32):
    return Image(np.random.default_rng(seed).uniform(0.1, 0.9, (size, size, 3)))


@pytest.fixture(scope="module")
def samples(lab0):
    return draw_benchmark_samples(lab0.victim, lab0.gallery,
                                  lab0.real_instructions, lab0.judge,
                                  count=4, seed=7)


class TestToyVictim:
    def test_deterministic_and_total(self, lab0):
        x = random_image(1)
        p = "What does this picture represent?"
        assert lab0.victim.respond(x, p) == lab0.victim.respond(x, p)
        assert lab0.victim.respond(x, p) in lab0.victim.captions

    def test_bank_of_one_always_answers_it(self, lab0):
        victim = ToyVictim(lab0.victim.features, lab0.victim.readout_seed,
                           ["the only possible reply"])
        for seed in range(3):
            assert victim.respond(random_image(seed), "anything?") == \
                "the only possible reply"

    def test_empty_bank_rejected(self, lab0):
        with pytest.raises(ConfigError):
            ToyVictim(lab0.victim.features, 0, [])
        with pytest.raises(ConfigError):
            ToyVictim(lab0.victim.features, 0, ["same", "same"])

    def test_argmax_matches_brute_force_oracle(self, lab0):
        victim = lab0.victim
        x = random_image(2)
        p = "Provide a description of the image below."
        readout = victim.readout_embedding(x, p)
        scores = [float(np.dot(victim._bank[i], readout))
                  for i in range(len(victim.captions))]
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        assert victim.respond(x, p) == victim.captions[best]

    def test_instruction_changes_response_somewhere(self, lab0):
        victim = lab0.victim
        found = False
        for x in lab0.gallery.images:
            replies = {victim.respond(x, p) for p in lab0.real_instructions}
            if len(replies) > 1:
                found = True
                break
        assert found


class TestClipScore:
    def test_identical_texts_score_one(self, lab0):
        scores, ensemble = clip_score("A red lighthouse on a rocky shore.",
                                      "A red lighthouse on a rocky shore.",
                                      lab0.ensemble)
        assert all(abs(s - 1.0) <= 1e-9 for s in scores)
        assert abs(ensemble - 1.0) <= 1e-9

    def test_symmetry(self, lab0):
        a, b = "boats in the harbor", "a castle on the hill"
        sa, ea = clip_score(a, b, lab0.ensemble)
        sb, eb = clip_score(b, a, lab0.ensemble)
        assert sa == sb and ea == eb

    def test_range_and_empty_rejected(self, lab0):
        scores, _ = clip_score("x y z", "entirely different words",
                               lab0.ensemble)
        assert all(-1.0 <= s <= 1.0 for s in scores)
        with pytest.raises(ContractError):
            clip_score("", "b", lab0.ensemble)

    def test_ensemble_is_plain_mean(self, lab0):
        scores, ensemble = clip_score("dogs on the lawn",
                                      "two dogs chasing a ball",
                                      lab0.ensemble)
        assert ensemble == float(np.mean(scores))


class TestJudges:
    def test_identical_text_succeeds(self, lab0):
        assert judge_success(lab0.judge, "same words here", "same words here")

    def test_impossible_threshold_fails_different_texts(self, lab0):
        strict = OfflineJudge(lab0.judge.embedder, tau=1.0 + 1e-9)
        assert not strict.judge("a cat", "a dog")

    def test_verdict_equals_direct_cosine(self, lab0):
        judge = lab0.judge
        a, b = "a steam train on a bridge", "fishing boats in the harbor"
        ea = T.l2_normalize(judge.embedder.embed(a)).data
        eb = T.l2_normalize(judge.embedder.embed(b)).data
        assert judge.judge(a, b) == (float(ea @ eb) >= judge.tau)

    def test_remote_judge_parses_leading_token(self):
        class Chat:
            def __init__(self, reply):
                self.reply = reply

            def chat(self, prompt):
                self.prompt = prompt
                return self.reply

        yes = Chat("Yes, they describe the same thing.")
        judge = RemoteJudge(yes)
        assert judge.judge("a", "b") is True
        assert "1. a" in yes.prompt and "2. b" in yes.prompt
        assert RemoteJudge(Chat("no")).judge("a", "b") is False
        with pytest.raises(JudgeFormatError):
            RemoteJudge(Chat("perhaps?")).judge("a", "b")


class TestEvalReport:
    def test_arithmetic_invariants(self):
        rec = SampleRecord("s0", "resp", "target", True, (0.5, 0.7))
        report = EvalReport(method="clean", encoder_scores=(0.5, 0.7),
                            ensemble_score=float(np.mean((0.5, 0.7))),
                            nos=1, total=3, samples=(rec,))
        assert report.asr == report.nos / report.total
        assert report.ensemble_score == float(np.mean(report.encoder_scores))
        assert report.asr * report.total == pytest.approx(report.nos)


class TestSampleConstruction:
    def test_counts_and_consistency(self, lab0, samples):
        assert len(samples) == 4
        for s in samples:
            # the target is reachable: the victim answers it on the
            # retrieved target image
            m = lab0.gallery.retrieve_index(s.target_text)
            reply = lab0.victim.respond(lab0.gallery.images[m],
                                        s.real_instruction)
            assert lab0.judge.judge(reply, s.target_text)
            # and the clean response does not already match
            clean = lab0.victim.respond(s.image, s.real_instruction)
            assert not lab0.judge.judge(clean, s.target_text)

    def test_deterministic(self, lab0):
        a = draw_benchmark_samples(lab0.victim, lab0.gallery,
                                   lab0.real_instructions, lab0.judge, 3, 5)
        b = draw_benchmark_samples(lab0.victim, lab0.gallery,
                                   lab0.real_instructions, lab0.judge, 3, 5)
        assert [(s.target_text, s.real_instruction) for s in a] == \
            [(s.target_text, s.real_instruction) for s in b]

    def test_usable_pair_table_nonempty(self, lab0):
        pairs = enumerate_usable_pairs(lab0.victim, lab0.gallery,
                                       lab0.real_instructions, lab0.judge)
        assert len(pairs) >= 6


def tiny_cfg(**kw):
    base = dict(iterations=4, seed=0)
    base.update(kw)
    return AttackConfig(**base)


class TestBenchmark:
    def test_zero_budget_method_equals_clean_row(self, lab0, samples):
        reports = run_benchmark(samples, ["instructta"], lab0.bench_context,
                                tiny_cfg(epsilon=0.0))
        clean, ita = reports["clean"], reports["instructta"]
        assert ita.nos == clean.nos
        assert ita.encoder_scores == clean.encoder_scores
        assert [s.response for s in ita.samples] == \
            [s.response for s in clean.samples]

    def test_manual_replay_of_success_flags(self, lab0, samples):
        from attacklab.attack import run_attack
        from attacklab.rng import derive_seed
        from attacklab.evaluation import _METHOD_KEYS
        from dataclasses import replace

        cfg = tiny_cfg()
        reports = run_benchmark(samples[:1], ["instructta"],
                                lab0.bench_context, cfg)
        rec = reports["instructta"].samples[0]
        child = derive_seed(cfg.seed, _METHOD_KEYS["instructta"], 0)
        res = run_attack(samples[0].image, samples[0].target_text, lab0.deps,
                         replace(cfg, seed=child))
        reply = lab0.victim.respond(res.adversarial,
                                    samples[0].real_instruction)
        assert rec.response == reply
        assert rec.success == lab0.judge.judge(reply, samples[0].target_text)

    def test_failure_carries_sample_id(self, lab0, samples):
        broken = [samples[0],
                  type(samples[1])(sample_id="s_bad", image=samples[1].image,
                                   target_text="", real_instruction="x?")]
        with pytest.raises(Exception, match="s_bad"):
            run_benchmark(broken, [], lab0.bench_context, tiny_cfg())

    def test_unknown_method_rejected(self, lab0, samples):
        with pytest.raises(ConfigError):
            run_benchmark(samples, ["fgsm"], lab0.bench_context, tiny_cfg())

    def test_judge_format_errors_exclude_and_count(self, lab0, samples):
        class FlakyJudge:
            def __init__(self, inner):
                self.inner = inner
                self.calls = 0

            def judge(self, response, target_text):
                self.calls += 1
                if self.calls == 1:
                    raise JudgeFormatError("ambiguous reply", payload="eh")
                return self.inner.judge(response, target_text)

        ctx = BenchContext(deps=lab0.deps, victim=lab0.victim,
                           judge=FlakyJudge(lab0.judge),
                           ensemble=lab0.ensemble)
        with pytest.warns(UserWarning, match="judge failed"):
            reports = run_benchmark(samples, [], ctx, tiny_cfg())
        clean = reports["clean"]
        assert clean.judge_errors == 1
        assert clean.total == len(samples) - 1
        assert clean.samples[0].success is None

    def test_parallel_workers_match_sequential(self, lab0, samples):
        seq = run_benchmark(samples, ["noise"], lab0.bench_context, tiny_cfg())
        ctx = BenchContext(deps=lab0.deps, victim=lab0.victim,
                           judge=lab0.judge, ensemble=lab0.ensemble, workers=2)
        par = run_benchmark(samples, ["noise"], ctx, tiny_cfg())
        for method in seq:
            assert seq[method].samples == par[method].samples
            assert seq[method].encoder_scores == par[method].encoder_scores


class TestSweep:
    def test_zero_epsilon_grid_matches_clean(self, lab0, samples):
        rows = sweep("epsilon", [0.0], samples, lab0.bench_context, tiny_cfg())
        clean = run_benchmark(samples, [], lab0.bench_context,
                              tiny_cfg(epsilon=0.0))["clean"]
        assert rows[0]["nos"] == clean.nos
        assert rows[0]["asr"] == clean.asr

    def test_n_grid_runs(self, lab0, samples):
        rows = sweep("n", [1, 3], samples, lab0.bench_context, tiny_cfg())
        assert [r["value"] for r in rows] == [1, 3]

    def test_shuffle_permutes_instructions(self, samples):
        shuffled = shuffle_instructions(samples, seed=1)
        assert sorted(s.real_instruction for s in shuffled) == \
            sorted(s.real_instruction for s in samples)
        assert [s.target_text for s in shuffled] == \
            [s.target_text for s in samples]
        again = shuffle_instructions(samples, seed=1)
        assert [s.real_instruction for s in again] == \
            [s.real_instruction for s in shuffled]

    def test_bad_kind_rejected(self, lab0, samples):
        with pytest.raises(ConfigError):
            sweep("gamma", [1], samples, lab0.bench_context, tiny_cfg())


class TestInstructionAudit:
    def test_identical_diagonal_is_one(self, lab0):
        fx = AuditFixture(inferred="What is in this photo?",
                          rephrasings=("Tell me what the photo shows.",),
                          real="What is in this photo?")
        table = instruction_audit([fx], lab0.ensemble[0])
        assert table.real_vs_real == pytest.approx(1.0, abs=1e-9)

    def test_single_pair_equals_direct_cosine(self, lab0):
        emb = lab0.ensemble[0]
        fx = AuditFixture(inferred="Describe the scene.",
                          rephrasings=("Explain the scene.",),
                          real="What is shown?")
        table = instruction_audit([fx], emb)
        ea = T.l2_normalize(emb.embed("Describe the scene.")).data
        eb = T.l2_normalize(emb.embed("Explain the scene.")).data
        assert table.inferred_vs_rephrased == pytest.approx(float(ea @ eb),
                                                            abs=1e-12)

    def test_direction_symmetry(self, lab0):
        emb = lab0.ensemble[0]
        a, b = "What is depicted here?", "Could you explain this image?"
        fwd = instruction_audit(
            [AuditFixture(inferred=a, rephrasings=(), real=b)], emb)
        rev = instruction_audit(
            [AuditFixture(inferred=b, rephrasings=(), real=a)], emb)
        assert fwd.inferred_vs_real == rev.inferred_vs_real

    def test_rephrasings_beat_unrelated_controls(self, lab0):
        provider = OfflineProvider(3)
        fixtures = build_audit_fixtures(
            provider, lab0.captions[:6], lab0.real_instructions, n=6, seed=0)
        table = instruction_audit(fixtures, lab0.ensemble[0])
        from attacklab.assets import load_unrelated_controls

        controls = load_unrelated_controls()
        control_fixtures = [
            AuditFixture(inferred=fx.inferred,
                         rephrasings=tuple(controls), real=fx.real)
            for fx in fixtures]
        control = instruction_audit(control_fixtures, lab0.ensemble[0])
        assert table.inferred_vs_rephrased > control.inferred_vs_rephrased


class TestPerceptual:
    def test_identical_images_are_zero(self):
        x = random_image(5)
        rep = perceptual_report(x, x)
        assert rep == {"linf": 0.0, "rmse": 0.0, "mean_abs": 0.0}

    def test_single_pixel_difference(self):
        base = np.full((32, 32, 3), 0.5)
        bumped = base.copy()
        bumped[3, 4, 1] += 8.0 / 255
        rep = perceptual_report(Image(base), Image(bumped))
        n = base.size
        assert rep["linf"] == pytest.approx(8.0 / 255)
        assert rep["mean_abs"] == pytest.approx((8.0 / 255) / n)

    def test_attack_result_within_budget(self, lab0, samples):
        from attacklab.attack import run_attack

        cfg = tiny_cfg(epsilon=6.0)
        res = run_attack(samples[0].image, samples[0].target_text, lab0.deps,
                         cfg)
        rep = perceptual_report(samples[0].image, res.adversarial)
        assert rep["linf"] <= cfg.epsilon_pixels + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            perceptual_report(random_image(0, 8), random_image(0, 16))


class TestReportFiles:
    def test_csv_reruns_are_byte_identical(self, lab0, samples, tmp_path):
        reports = run_benchmark(samples, ["noise"], lab0.bench_context,
                                tiny_cfg())
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_report_csv(reports, a, order=["clean", "noise"])
        write_report_csv(reports, b, order=["clean", "noise"])
        assert a.read_bytes() == b.read_bytes()
        header = a.read_text().splitlines()[0]
        assert header.startswith("method,enc0")
        assert header.endswith("ensemble,nos,total,asr")

    def test_json_contains_per_sample_records(self, lab0, samples, tmp_path):
        import json

        reports = run_benchmark(samples, ["noise"], lab0.bench_context,
                                tiny_cfg())
        path = tmp_path / "r.json"
        write_report_json(reports, path, order=["clean", "noise"])
        payload = json.loads(path.read_text())
        assert {p["method"] for p in payload} == {"clean", "noise"}
        assert len(payload[0]["samples"]) == len(samples)
