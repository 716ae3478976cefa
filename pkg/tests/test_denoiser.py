from __future__ import annotations

import math

import numpy as np
import pytest

from storyscene import prompts
from storyscene.attention import SubjectMask
from storyscene.clients import MockVlmClient, procedural_image
from storyscene.denoiser import (DenoiserConfig, PromptBinding, RemoteDenoiser,
                                 SceneBinding, ToyDecoder, ToyDenoiser,
                                 embed_scene_image, embedding_collision_rate,
                                 toy_embed)
from storyscene.errors import ContractError, DimensionError
from storyscene.planner import load_theme_corpus


def softmax_rows_inline(a: np.ndarray) -> np.ndarray:
    exps = np.exp(a - a.max(axis=1, keepdims=True))
    return exps / exps.sum(axis=1, keepdims=True)


def make_scene(seed_text="a quiet grove", d_model=32) -> SceneBinding:
    return SceneBinding.from_image(procedural_image(seed_text, 64), d_model)


class TestToyEmbed:
    def test_rows_unit_norm(self):
        out = toy_embed("a fox")
        assert out.shape == (2, 32)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_repeated_word_identical_rows(self):
        out = toy_embed("wolf wolf")
        assert np.array_equal(out[0], out[1])

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            toy_embed("   ")

    def test_collision_audit_over_offline_corpus(self):
        vocabulary: set[str] = set()
        mock = MockVlmClient()
        for theme in load_theme_corpus():
            vocabulary.update(theme.split())
            concept = mock.chat(prompts.conceptualize_messages(theme)).text
            vocabulary.update(concept.split())
            craft = mock.chat(prompts.craft_messages(theme, "data:,x")).text
            vocabulary.update(craft.split())
        vocabulary.update(prompts.CONCEPT_EXAMPLE_REPLY.split())
        vocabulary.update(prompts.CRAFT_EXAMPLE_REPLY.split())
        rate = embedding_collision_rate(vocabulary)
        print(f"embedding hash collision rate over {len(vocabulary)} tokens: {rate}")
        assert rate == 0.0


class TestSceneEmbedding:
    def test_deterministic_and_unit_norm(self):
        pixels = procedural_image("harbor", 64)
        first = embed_scene_image(pixels)
        second = embed_scene_image(pixels)
        assert np.array_equal(first, second)
        assert first.shape == (16, 32)
        np.testing.assert_allclose(np.linalg.norm(first, axis=1), 1.0, atol=1e-9)

    def test_rejects_non_rgb(self):
        with pytest.raises(DimensionError):
            embed_scene_image(np.zeros((8, 8)))


class TestDecode:
    def test_zero_latent_is_mid_gray(self):
        decoder = ToyDecoder((8, 8, 4))
        image = decoder(np.zeros((8, 8, 4)))
        assert image.shape == (64, 64, 3)
        assert np.all(image == 128)

    def test_negation_symmetry(self):
        decoder = ToyDecoder((8, 8, 4))
        rng = np.random.default_rng(0)
        z = rng.standard_normal((8, 8, 4))
        total = decoder(z).astype(int) + decoder(-z).astype(int)
        assert np.all(np.abs(total - 255) <= 1)

    def test_upsample_contract(self):
        decoder = ToyDecoder((8, 8, 4))
        assert decoder(np.zeros((8, 8, 4))).shape == (64, 64, 3)

    def test_shape_mismatch(self):
        decoder = ToyDecoder((8, 8, 4))
        with pytest.raises(DimensionError):
            decoder(np.zeros((4, 4, 4)))


class TestPredictEpsContracts:
    def setup_method(self):
        self.denoiser = ToyDenoiser(DenoiserConfig(seed=1))
        self.scene = make_scene()
        self.prompt = PromptBinding.from_text("a fox explores the meadow", 1)
        rng = np.random.default_rng(2)
        self.z = rng.standard_normal((8, 8, 4))

    def test_three_latents_rejected(self):
        with pytest.raises(ContractError):
            self.denoiser.predict_eps([self.z] * 3, 5, [self.prompt] * 3,
                                      self.scene, [None] * 3, sharing=True)

    def test_sharing_flag_must_match_batch(self):
        with pytest.raises(ContractError):
            self.denoiser.predict_eps([self.z], 5, [self.prompt], self.scene,
                                      [None], sharing=True)
        with pytest.raises(ContractError):
            self.denoiser.predict_eps([self.z] * 2, 5, [self.prompt] * 2,
                                      self.scene, [None] * 2, sharing=False)

    def test_latent_shape_checked(self):
        with pytest.raises(DimensionError):
            self.denoiser.predict_eps([np.zeros((4, 4, 4))], 5, [self.prompt],
                                      self.scene, [None])

    def test_counters_and_records(self):
        before = self.denoiser.stats.invocations
        self.denoiser.predict_eps([self.z], 5, [self.prompt], self.scene,
                                  [None], story_ids=(1,))
        self.denoiser.predict_eps([self.z, self.z], 4, [self.prompt] * 2,
                                  self.scene, [None, None], sharing=True,
                                  story_ids=(1, 2))
        stats = self.denoiser.stats
        assert stats.invocations == before + 2
        assert stats.max_batch == 2
        assert stats.records[-1].story_ids == (1, 2)
        assert stats.joint_calls_per_story(4) == {1: 1, 2: 1}


class TestPredictEpsBehavior:
    def test_zero_weights_zero_inputs_give_zero_eps(self):
        denoiser = ToyDenoiser(DenoiserConfig(seed=3, weight_scale=0.0))
        prompt = PromptBinding(np.zeros((3, 32)), 0, "zero prompt")
        scene = SceneBinding(np.zeros((4, 32)))
        prediction = denoiser.predict_eps([np.zeros((8, 8, 4))], 5, [prompt],
                                          scene, [None])
        assert np.array_equal(prediction.eps[0], np.zeros((8, 8, 4)))

    def test_paired_identical_inputs_give_identical_eps(self):
        denoiser = ToyDenoiser(DenoiserConfig(seed=4))
        scene = make_scene()
        prompt = PromptBinding.from_text("the girl dances among the trees", 1)
        rng = np.random.default_rng(5)
        z = rng.standard_normal((8, 8, 4))
        mask = SubjectMask((np.arange(64).reshape(8, 8) % 2).astype(float))
        prediction = denoiser.predict_eps(
            [z, z.copy()], 6, [prompt, prompt], scene, [mask, mask],
            sharing=True)
        assert np.array_equal(prediction.eps[0], prediction.eps[1])

    def test_equal_seeds_extensionally_equal(self):
        first = ToyDenoiser(DenoiserConfig(seed=11))
        second = ToyDenoiser(DenoiserConfig(seed=11))
        scene = make_scene()
        prompt = PromptBinding.from_text("an owl perches on a branch", 1)
        rng = np.random.default_rng(6)
        for _ in range(100):
            z = rng.standard_normal((8, 8, 4))
            a = first.predict_eps([z], 5, [prompt], scene, [None])
            b = second.predict_eps([z], 5, [prompt], scene, [None])
            assert np.array_equal(a.eps[0], b.eps[0])

    def test_different_seeds_differ(self):
        scene = make_scene()
        prompt = PromptBinding.from_text("a deer grazes quietly", 1)
        z = np.random.default_rng(7).standard_normal((8, 8, 4))
        a = ToyDenoiser(DenoiserConfig(seed=1)).predict_eps(
            [z], 5, [prompt], scene, [None])
        b = ToyDenoiser(DenoiserConfig(seed=2)).predict_eps(
            [z], 5, [prompt], scene, [None])
        assert not np.array_equal(a.eps[0], b.eps[0])

    def test_scene_weight_changes_output(self):
        scene = make_scene()
        prompt = PromptBinding.from_text("a rabbit hops through the grass", 1)
        z = np.random.default_rng(8).standard_normal((8, 8, 4))
        mask = SubjectMask((np.arange(64).reshape(8, 8) % 2).astype(float))
        on = ToyDenoiser(DenoiserConfig(seed=9, scene_weight=0.5)).predict_eps(
            [z], 5, [prompt], scene, [mask])
        off = ToyDenoiser(DenoiserConfig(seed=9, scene_weight=0.0)).predict_eps(
            [z], 5, [prompt], scene, [mask])
        assert np.max(np.abs(on.eps[0] - off.eps[0])) > 1e-9

    def test_straight_line_rederivation_of_single_call(self):
        cfg = DenoiserConfig(seed=21, latent_height=4, latent_width=4)
        denoiser = ToyDenoiser(cfg)
        scene = make_scene()
        prompt = PromptBinding.from_text("a fox explores the meadow", 1)
        rng = np.random.default_rng(22)
        z = rng.standard_normal((4, 4, 4))
        mask = SubjectMask(rng.integers(0, 2, (4, 4)).astype(float))
        prediction = denoiser.predict_eps([z], 5, [prompt], scene, [mask])

        # Independent re-derivation of the same block sequence.
        scale = math.sqrt(cfg.head_dim)
        tokens = z.reshape(16, 4) @ denoiser.w_embed + denoiser.pos_embed
        q = tokens @ denoiser.cross_proj.w_query
        text_map = softmax_rows_inline(
            q @ (prompt.embeddings @ denoiser.cross_proj.w_key_text).T / scale)
        scene_map = softmax_rows_inline(
            q @ (scene.embeddings @ denoiser.cross_proj.w_key_scene).T / scale)
        gate = (1.0 - mask.values.reshape(-1))[:, None]
        injected = (text_map @ (prompt.embeddings @ denoiser.cross_proj.w_value_text)
                    + cfg.scene_weight * gate
                    * (scene_map @ (scene.embeddings @ denoiser.cross_proj.w_value_scene)))
        tokens = tokens + injected @ denoiser.w_cross_out
        q2 = tokens @ denoiser.w_q_self
        k2 = tokens @ denoiser.w_k_self
        v2 = tokens @ denoiser.w_v_self
        attended = softmax_rows_inline(q2 @ k2.T / scale) @ v2
        tokens = tokens + attended @ denoiser.w_self_out
        expected = (z.reshape(16, 4)
                    + cfg.head_gain * np.tanh(tokens @ denoiser.w_head)
                    ).reshape(4, 4, 4)

        np.testing.assert_allclose(prediction.eps[0], expected, rtol=0, atol=1e-10)
        np.testing.assert_allclose(prediction.text_maps[0], text_map, atol=1e-12)

    def test_two_heads_run_and_differ_from_one(self):
        scene = make_scene()
        prompt = PromptBinding.from_text("a heron waits by the stream", 1)
        z = np.random.default_rng(23).standard_normal((8, 8, 4))
        single = ToyDenoiser(DenoiserConfig(seed=30, heads=1)).predict_eps(
            [z], 5, [prompt], scene, [None])
        double = ToyDenoiser(DenoiserConfig(seed=30, heads=2)).predict_eps(
            [z], 5, [prompt], scene, [None])
        assert single.eps[0].shape == double.eps[0].shape
        assert not np.array_equal(single.eps[0], double.eps[0])


def test_concurrent_calls_on_one_handle():
    from concurrent.futures import ThreadPoolExecutor

    denoiser = ToyDenoiser(DenoiserConfig(seed=55))
    scene = make_scene()
    prompt = PromptBinding.from_text("a traveler studies the stone stairs", 1)
    z = np.random.default_rng(56).standard_normal((8, 8, 4))

    def call(_):
        return denoiser.predict_eps([z], 5, [prompt], scene, [None]).eps[0]

    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(call, range(64)))
    assert denoiser.stats.invocations == 64
    assert len(denoiser.stats.records) == 64
    for result in results[1:]:
        assert np.array_equal(result, results[0])


def test_remote_denoiser_is_a_stub():
    stub = RemoteDenoiser("https://example.invalid/eps")
    with pytest.raises(NotImplementedError):
        stub.predict_eps([], 1, [], None, [])


def test_denoiser_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(heads=3)  # does not divide head_dim=32
    with pytest.raises(ValueError):
        DenoiserConfig(scene_weight=-1.0)
    with pytest.raises(ValueError):
        DenoiserConfig(mask_mode="smear")
