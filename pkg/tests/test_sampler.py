import math

import numpy as np
import pytest
import torch

from madpan import codec, sampler
from madpan.backbone import make_toy_model, predict_eps, ToyDenoiserConfig
from madpan.conditioning import ToyTextEmbedder
from madpan.mad import MergeSchedule
from madpan.sampler import (
    ConsistencyParam,
    NoiseSchedule,
    SamplerConfig,
    SamplerError,
    cfg_combine,
    consistency_step,
    ddim_step,
    generate_panorama,
    multistep_consistency_sample,
    timestep_ladder,
)
from madpan.tiling import PanoramaSpec, merge, plan_views, split, ViewStack

SMALL = ToyDenoiserConfig(base_channels=8, timestep_embed_dim=16, context_dim=8)


class TestNoiseSchedule:
    def test_variance_preserving(self, toy_schedule):
        total = toy_schedule.alphas**2 + toy_schedule.sigmas**2
        assert torch.allclose(total, torch.ones_like(total), atol=1e-6)

    def test_endpoints(self, toy_schedule):
        assert toy_schedule.alphas[0].item() == pytest.approx(1.0)
        assert toy_schedule.sigmas[0].item() == pytest.approx(0.0)
        # chosen so the last timestep is essentially pure noise
        assert toy_schedule.alphas[-1].item() < 1e-2

    def test_cumprod_oracle(self):
        # 3-step hand computation of alpha = sqrt(prod(1 - beta))
        betas = torch.tensor([0.1, 0.2, 0.3])
        sched = NoiseSchedule.from_betas(betas, "custom", {})
        want = [1.0, math.sqrt(0.9), math.sqrt(0.9 * 0.8), math.sqrt(0.9 * 0.8 * 0.7)]
        np.testing.assert_allclose(sched.alphas.numpy(), want, atol=1e-6)

    def test_monotonicity_enforced(self):
        with pytest.raises(SamplerError):
            NoiseSchedule(alphas=torch.tensor([0.5, 0.9]),
                          sigmas=torch.tensor([0.1, 0.2]))

    def test_dict_roundtrip(self):
        for sched in (NoiseSchedule.default_toy(50),
                      NoiseSchedule.scaled_linear(),
                      NoiseSchedule.linear_beta(10)):
            back = NoiseSchedule.from_dict(sched.to_dict())
            assert torch.equal(back.alphas, sched.alphas)


class TestCfg:
    def test_endpoints(self):
        u = torch.tensor([1.0, 2.0])
        c = torch.tensor([3.0, 5.0])
        assert torch.equal(cfg_combine(u, c, 0.0), u)
        assert torch.equal(cfg_combine(u, c, 1.0), c)

    def test_hand_value(self):
        u = torch.tensor([0.2])
        c = torch.tensor([0.4])
        assert cfg_combine(u, c, 7.5).item() == pytest.approx(0.2 + 7.5 * 0.2)

    def test_shape_mismatch(self):
        with pytest.raises(SamplerError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


class TestDdimStep:
    def test_scalar_closed_form(self):
        # if eps_hat is exactly consistent with a known x0, every eta=0 step
        # lands on alpha_prev * x0 + sigma_prev * eps
        x0, eps = 0.7, -0.3
        a_t, s_t = 0.6, 0.8
        a_p, s_p = 0.9, math.sqrt(1 - 0.81)
        x_t = a_t * x0 + s_t * eps
        out = ddim_step(torch.tensor([x_t]), torch.tensor([eps]), a_t, s_t, a_p, s_p)
        assert out.item() == pytest.approx(a_p * x0 + s_p * eps, abs=1e-6)

    def test_final_step_recovers_x0(self):
        x0, eps = 1.25, 0.5
        a_t, s_t = 0.5, math.sqrt(0.75)
        x_t = a_t * x0 + s_t * eps
        out = ddim_step(torch.tensor([x_t]), torch.tensor([eps]), a_t, s_t, 1.0, 0.0)
        assert out.item() == pytest.approx(x0, abs=1e-6)

    def test_eta_zero_deterministic(self):
        x = torch.randn(3, generator=torch.Generator().manual_seed(0))
        e = torch.randn(3, generator=torch.Generator().manual_seed(1))
        a = ddim_step(x, e, 0.6, 0.8, 0.9, 0.435889894354)
        b = ddim_step(x, e, 0.6, 0.8, 0.9, 0.435889894354)
        assert torch.equal(a, b)

    def test_eta_requires_noise(self):
        with pytest.raises(SamplerError):
            ddim_step(torch.zeros(1), torch.zeros(1), 0.6, 0.8, 0.9, 0.43, eta=0.5)

    def test_eta_one_variance_split(self):
        # with eta=1 the deterministic direction shrinks so that total
        # variance still matches sigma_prev^2
        a_t, s_t = 0.6, 0.8
        a_p, s_p = 0.9, math.sqrt(1 - 0.81)
        eta = 1.0
        ddim_sigma = eta * (s_p / s_t) * math.sqrt(1 - a_t**2 / a_p**2)
        dir_coef = math.sqrt(max(s_p**2 - ddim_sigma**2, 0.0))
        x = torch.tensor([0.3])
        e = torch.tensor([0.1])
        n = torch.tensor([2.0])
        out = ddim_step(x, e, a_t, s_t, a_p, s_p, eta=eta, noise=n)
        x0 = (0.3 - s_t * 0.1) / a_t
        want = a_p * x0 + dir_coef * 0.1 + ddim_sigma * 2.0
        assert out.item() == pytest.approx(want, abs=1e-6)


class TestConsistency:
    def test_boundary_condition(self):
        params = ConsistencyParam.default()
        x = torch.tensor([3.0])
        out = consistency_step(x, params.boundary_t, torch.tensor([99.0]), params)
        assert torch.equal(out, x)

    def test_hand_value(self):
        params = ConsistencyParam(
            c_skip=lambda t: 1.0 if t == 0 else 0.5,
            c_out=lambda t: 0.0 if t == 0 else 0.5,
        )
        out = consistency_step(torch.tensor([2.0]), 1.0, torch.tensor([4.0]), params)
        assert out.item() == pytest.approx(0.5 * 2 + 0.5 * 4)

    def test_invalid_boundary_rejected(self):
        with pytest.raises(SamplerError):
            ConsistencyParam(c_skip=lambda t: 0.9, c_out=lambda t: 0.0)
        with pytest.raises(SamplerError):
            ConsistencyParam(c_skip=lambda t: 1.0, c_out=lambda t: 0.1)


class TestLadder:
    def test_even_spacing(self):
        assert timestep_ladder(100, 4) == [100, 75, 50, 25, 0]
        assert timestep_ladder(100, 1) == [100, 0]

    def test_rejects_collapse(self):
        with pytest.raises(SamplerError):
            timestep_ladder(100, 200)
        with pytest.raises(SamplerError):
            timestep_ladder(3, 0)


class TestSamplerConfig:
    def test_validation(self):
        with pytest.raises(SamplerError):
            SamplerConfig(mode="euler")
        with pytest.raises(SamplerError):
            SamplerConfig(steps=0)
        with pytest.raises(SamplerError):
            SamplerConfig(eta=1.5)

    def test_dict_roundtrip(self):
        cfg = SamplerConfig(mode="ddim", steps=7, guidance_scale=2.0, eta=0.3, seed=9)
        assert SamplerConfig.from_dict(cfg.to_dict()) == cfg


def _toy_setup(width_latent=20, channels=4):
    pano = PanoramaSpec(
        image_height=8, image_width=width_latent, latent_scale=1,
        latent_channels=channels, view_size=8, stride=4,
    )
    model = make_toy_model(SMALL, init_seed=0)
    embedder = ToyTextEmbedder(dim=SMALL.context_dim)
    sched = NoiseSchedule.default_toy(50)
    decoder = codec.DecoderSpec(kind="toy-linear", latent_scale=1,
                                latent_channels=channels)
    return pano, model, embedder, sched, decoder


class TestGeneratePanorama:
    def test_deterministic(self):
        pano, model, embedder, sched, decoder = _toy_setup()
        merge_s = MergeSchedule(tau=2, total_steps=4)
        cfg = SamplerConfig(mode="ddim", steps=4, guidance_scale=1.0, seed=3)
        img1, man1, _ = generate_panorama(pano, "p", merge_s, cfg, model,
                                          decoder, sched, embedder)
        img2, man2, _ = generate_panorama(pano, "p", merge_s, cfg, model,
                                          decoder, sched, embedder)
        assert np.array_equal(img1, img2)
        assert man1.output_hashes == man2.output_hashes

    def test_seed_changes_output(self):
        pano, model, embedder, sched, decoder = _toy_setup()
        merge_s = MergeSchedule.never(3)
        a, _, _ = generate_panorama(
            pano, "", merge_s, SamplerConfig(mode="ddim", steps=3, seed=0,
                                             guidance_scale=1.0),
            model, decoder, sched, embedder)
        b, _, _ = generate_panorama(
            pano, "", merge_s, SamplerConfig(mode="ddim", steps=3, seed=1,
                                             guidance_scale=1.0),
            model, decoder, sched, embedder)
        assert not np.array_equal(a, b)

    def test_step_count_mismatch_rejected(self):
        pano, model, embedder, sched, decoder = _toy_setup()
        with pytest.raises(SamplerError):
            generate_panorama(
                pano, "", MergeSchedule.never(5),
                SamplerConfig(mode="ddim", steps=4, guidance_scale=1.0),
                model, decoder, sched, embedder)

    def test_manifest_complete_and_replayable(self, tmp_path):
        pano, model, embedder, sched, decoder = _toy_setup()
        merge_s = MergeSchedule(tau=1, total_steps=3)
        cfg = SamplerConfig(mode="ddim", steps=3, guidance_scale=1.5, seed=5)
        img, manifest, _ = generate_panorama(
            pano, "night sky", merge_s, cfg, model, decoder, sched, embedder,
            backbone_info={"id": "toy", "config": SMALL.to_dict(), "init_seed": 0},
        )
        for key in codec.MANIFEST_REQUIRED_KEYS:
            assert key in manifest.to_dict()
        path = tmp_path / "m.json"
        codec.write_manifest(manifest, path)
        img2, man2 = sampler.replay_run(codec.load_manifest(path))
        assert np.array_equal(img, img2)
        assert man2.output_hashes == manifest.output_hashes

    def test_latent_dump(self, tmp_path):
        pano, model, embedder, sched, decoder = _toy_setup()
        cfg = SamplerConfig(mode="ddim", steps=3, guidance_scale=1.0, seed=0)
        _, _, x = generate_panorama(
            pano, "", MergeSchedule.never(3), cfg, model, decoder, sched,
            embedder, dump_latents_dir=tmp_path / "lat")
        files = sorted((tmp_path / "lat").glob("*.bin"))
        assert len(files) == 3
        last, step = codec.read_latent(files[-1])
        assert step == 2
        assert torch.allclose(last, x.float(), atol=1e-6)

    def test_step_failure_wrapped(self):
        pano, model, embedder, sched, decoder = _toy_setup()

        class Broken:
            config = SMALL

            def attention_layers(self):
                return model.attention_layers()

        cfg = SamplerConfig(mode="ddim", steps=2, guidance_scale=1.0)
        with pytest.raises(SamplerError, match="denoise step 0"):
            generate_panorama(pano, "", MergeSchedule.never(2), cfg, Broken(),
                              decoder, sched, embedder)

    def test_consistency_mode_runs(self):
        pano, model, embedder, sched, decoder = _toy_setup()
        cfg = SamplerConfig(mode="consistency", steps=2, guidance_scale=1.0,
                            seed=0)
        img, manifest, _ = generate_panorama(
            pano, "", MergeSchedule(tau=1, total_steps=2), cfg, model, decoder,
            sched, embedder)
        assert img.shape == (8, 20, 3)
        assert manifest.sampler["mode"] == "consistency"


class TestMultiDiffusionEquivalence:
    def test_joint_step_matches_reference(self):
        # independent per-view prediction + per-view update + averaging,
        # written from scratch, must match joint_denoise_step at tau=0
        pano, model, embedder, sched, decoder = _toy_setup()
        layout = plan_views(pano, "horizontal")
        ctx = embedder.embed("x")
        null = embedder.null_embedding()
        x = torch.randn((4, 8, 20), generator=torch.Generator().manual_seed(7))
        cfg = SamplerConfig(mode="ddim", steps=1, guidance_scale=1.0, eta=0.0)
        out = sampler.joint_denoise_step(
            x, 0, 50, 25, layout, MergeSchedule.never(1), cfg, model, ctx,
            null, sched)
        # reference path
        a_t, s_t = sched.coeffs(50)
        a_p, s_p = sched.coeffs(25)
        L = layout.view_size
        acc = torch.zeros_like(x)
        counts = torch.zeros(layout.canvas_shape)
        for r, c in layout.origins:
            view = x[:, r : r + L, c : c + L].clone()
            eps = predict_eps(model, view, 50, ctx)
            x0 = (view - s_t * eps) / a_t
            acc[:, r : r + L, c : c + L] += a_p * x0 + s_p * eps
            counts[r : r + L, c : c + L] += 1
        ref = acc / counts
        assert torch.equal(out, ref)


class TestConsistencySampling:
    def test_single_step_is_one_evaluation(self):
        pano, model, embedder, sched, decoder = _toy_setup()
        layout = plan_views(pano, "horizontal")
        ctx = embedder.null_embedding()
        params = ConsistencyParam.default()
        gen = torch.Generator().manual_seed(0)
        x = torch.randn((4, 8, 20), generator=gen)
        cfg = SamplerConfig(mode="consistency", steps=1, guidance_scale=1.0)
        out = multistep_consistency_sample(
            x, layout, MergeSchedule.never(1), cfg, model, ctx, ctx, sched,
            params, torch.Generator().manual_seed(0))
        # reference: per view F = (x - sigma eps)/alpha, consistency blend,
        # then overlap averaging
        t = sched.total_timesteps
        a_t, s_t = sched.coeffs(t)
        a_safe = max(a_t, 1e-8)
        stack = split(x, layout)
        eps = predict_eps(model, stack, t, ctx, MergeSchedule.never(1), 0)
        views = []
        for v, e in zip(stack.views, eps.views):
            f = (v - s_t * e) / a_safe
            views.append(params.c_skip(t) * v + params.c_out(t) * f)
        ref = merge(ViewStack(views=views, layout=layout))
        assert torch.equal(out, ref)

    def test_step_counts(self):
        pano, model, embedder, sched, decoder = _toy_setup()
        layout = plan_views(pano, "horizontal")
        ctx = embedder.null_embedding()
        params = ConsistencyParam.default()
        for steps in (1, 2, 4):
            calls = []
            cfg = SamplerConfig(mode="consistency", steps=steps,
                                guidance_scale=1.0)
            x = torch.randn((4, 8, 20),
                            generator=torch.Generator().manual_seed(0))
            multistep_consistency_sample(
                x, layout, MergeSchedule.never(steps), cfg, model, ctx, ctx,
                sched, params, torch.Generator().manual_seed(0),
                on_step=lambda i, _x: calls.append(i))
            assert calls == list(range(steps))


class TestRuntimeProfile:
    def test_flop_oracle_quadratic(self):
        ns = [64, 128, 256, 512]
        flops = [sampler.attention_matmul_flops(n, 32) for n in ns]
        assert sampler.fit_scaling_exponent(ns, flops) == pytest.approx(2.0)

    def test_fit_recovers_power_law(self):
        ws = [2, 4, 8, 16]
        assert sampler.fit_scaling_exponent(
            ws, [3.0 * w**1.5 for w in ws]) == pytest.approx(1.5)

    def test_profile_rows(self, toy_schedule):
        model = make_toy_model(SMALL, init_seed=0)
        ctx = ToyTextEmbedder(dim=SMALL.context_dim).null_embedding()
        rows = sampler.runtime_profile(
            model, ctx, toy_schedule, view_size=8, stride=4,
            latent_channels=4, widths=[8, 16], repeats=1)
        assert len(rows) == 6
        modes = {r["mode"] for r in rows}
        assert modes == {"direct-long", "joint-tau0", "joint-tauT"}
        assert all(r["seconds"] > 0 for r in rows)
