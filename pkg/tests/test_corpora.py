import numpy as np
import pytest

from gradmix.corpora import (
    LanguageCorpus,
    LanguageProfile,
    SyntheticProfile,
    batch_iter,
    build_mixed_dataset,
    build_oracle_bank,
    build_shot_bank,
    default_benchmark,
    distant_lang_ids,
    gen_synthetic_family,
    ingest_tsv,
    merge_splits,
    profile_from_manifest,
    sample_k_shots,
    sample_n_way_k_shot,
    shots_dataset,
)
from gradmix.numcore import ContractViolation, RngStreams


def small_profile(**overrides):
    kwargs = dict(
        languages=(
            LanguageProfile("s", "scr-0", "source", 0.0, (0.0, 0.0), 40, 10, 10),
            LanguageProfile("t1", "scr-1", "target", 30.0, (1.0, 0.0), 30, 10, 10),
            LanguageProfile("t2", "scr-1", "target", 30.0, (0.0, 1.0), 30, 10, 10),
        ),
        num_classes=3,
        input_dim=2,
        seed=11,
    )
    kwargs.update(overrides)
    return SyntheticProfile(**kwargs)


def make_cls_corpus(lang_id="t", n_train=20, num_classes=3, dim=2, seed=0, role="target"):
    rng = np.random.default_rng(seed)
    train = tuple(
        (rng.normal(size=dim), int(i % num_classes)) for i in range(n_train)
    )
    return LanguageCorpus(
        lang_id=lang_id,
        script_tag="scr",
        role=role,
        task="classification",
        num_classes=num_classes,
        input_dim=dim,
        train=train,
    )


class TestSyntheticGeneration:
    def test_deterministic(self):
        a, _ = gen_synthetic_family(small_profile())
        b, _ = gen_synthetic_family(small_profile())
        for ca, cb in zip(a, b):
            for ea, eb in zip(ca.train, cb.train):
                assert np.array_equal(ea[0], eb[0])
                assert ea[1] == eb[1]

    def test_shared_script_means_differ_only_by_translation(self):
        _, manifest = gen_synthetic_family(small_profile())
        langs = {l["lang_id"]: l for l in manifest["languages"]}
        m1 = np.array([[float(v) for v in row] for row in langs["t1"]["class_means"]])
        m2 = np.array([[float(v) for v in row] for row in langs["t2"]["class_means"]])
        deltas = m2 - m1
        assert np.allclose(deltas, deltas[0], atol=1e-12)

    def test_zero_rotation_means_identical_up_to_translation_zero(self):
        profile = small_profile(
            languages=(
                LanguageProfile("s", "a", "source", 0.0, (0.0, 0.0), 20, 5, 5),
                LanguageProfile("t", "b", "target", 0.0, (0.0, 0.0), 20, 5, 5),
            )
        )
        _, manifest = gen_synthetic_family(profile)
        langs = {l["lang_id"]: l for l in manifest["languages"]}
        ms = np.array([[float(v) for v in r] for r in langs["s"]["class_means"]])
        mt = np.array([[float(v) for v in r] for r in langs["t"]["class_means"]])
        assert np.array_equal(ms, mt)

    def test_degenerate_identical_languages_allowed(self):
        profile = small_profile(
            languages=(
                LanguageProfile("s", "a", "source", 0.0, (0.0, 0.0), 10, 2, 2),
                LanguageProfile("t1", "a", "target", 0.0, (0.0, 0.0), 10, 2, 2),
                LanguageProfile("t2", "a", "target", 0.0, (0.0, 0.0), 10, 2, 2),
            )
        )
        corpora, _ = gen_synthetic_family(profile)
        assert len(corpora) == 3

    def test_negative_counts_rejected(self):
        profile = small_profile(
            languages=(
                LanguageProfile("s", "a", "source", 0.0, (0.0, 0.0), -1, 2, 2),
                LanguageProfile("t", "b", "target", 0.0, (0.0, 0.0), 10, 2, 2),
            )
        )
        with pytest.raises(ContractViolation, match="negative"):
            gen_synthetic_family(profile)

    def test_shared_script_requires_shared_angle(self):
        profile = small_profile(
            languages=(
                LanguageProfile("s", "a", "source", 0.0, (0.0, 0.0), 10, 2, 2),
                LanguageProfile("t1", "b", "target", 10.0, (0.0, 0.0), 10, 2, 2),
                LanguageProfile("t2", "b", "target", 20.0, (0.0, 0.0), 10, 2, 2),
            )
        )
        with pytest.raises(ContractViolation, match="share the rotation"):
            gen_synthetic_family(profile)

    def test_duplicate_ids_rejected(self):
        profile = small_profile(
            languages=(
                LanguageProfile("s", "a", "source", 0.0, (0.0, 0.0), 10, 2, 2),
                LanguageProfile("s", "b", "target", 0.0, (0.0, 0.0), 10, 2, 2),
            )
        )
        with pytest.raises(ContractViolation, match="unique"):
            gen_synthetic_family(profile)

    def test_manifest_round_trip(self):
        profile = small_profile()
        corpora, manifest = gen_synthetic_family(profile)
        again, _ = gen_synthetic_family(profile_from_manifest(manifest))
        for ca, cb in zip(corpora, again):
            assert ca.lang_id == cb.lang_id
            for ea, eb in zip(ca.test, cb.test):
                assert np.array_equal(ea[0], eb[0])

    def test_default_benchmark_shape(self, bench):
        corpora, manifest = bench
        assert len(corpora) == 7
        source = [c for c in corpora if c.role == "source"]
        assert len(source) == 1 and source[0].lang_id == "src"
        assert len(source[0].train) == 500
        for c in corpora:
            assert len(c.dev) == 100 and len(c.test) == 100
        assert distant_lang_ids(manifest) == ("far-a", "far-b", "far-c")


class TestShotSampling:
    def test_k_equals_train_size_gives_all_indices(self):
        corpus = make_cls_corpus(n_train=8)
        picked = sample_k_shots(corpus, 8, RngStreams(1))
        assert sorted(picked) == list(range(8))

    def test_distinct_indices(self):
        corpus = make_cls_corpus(n_train=50)
        picked = sample_k_shots(corpus, 10, RngStreams(2))
        assert len(set(picked)) == 10

    def test_same_seed_same_shots(self):
        corpus = make_cls_corpus()
        assert sample_k_shots(corpus, 5, RngStreams(3)) == sample_k_shots(
            corpus, 5, RngStreams(3)
        )

    def test_different_seeds_differ(self):
        corpus = make_cls_corpus(n_train=200)
        a = sample_k_shots(corpus, 5, RngStreams(1))
        b = sample_k_shots(corpus, 5, RngStreams(2))
        assert a != b

    def test_insensitive_to_other_stream_consumption(self):
        corpus = make_cls_corpus()
        r = RngStreams(4)
        r.shuffle.random(100)
        r.lang_pick.integers(0, 5, size=33)
        assert sample_k_shots(corpus, 5, r) == sample_k_shots(corpus, 5, RngStreams(4))

    def test_k_too_large(self):
        corpus = make_cls_corpus(n_train=4)
        with pytest.raises(ContractViolation, match="exceeds"):
            sample_k_shots(corpus, 5, RngStreams(0))

    def test_n_way_cardinality(self):
        corpus = make_cls_corpus(n_train=30, num_classes=3)
        picked = sample_n_way_k_shot(corpus, 1, RngStreams(5))
        assert len(picked) == 3
        labels = sorted(int(corpus.train[i][1]) for i in picked)
        assert labels == [0, 1, 2]

    def test_n_way_histogram_uniform(self):
        for seed in range(10):
            corpus = make_cls_corpus(n_train=40, num_classes=4, seed=seed)
            picked = sample_n_way_k_shot(corpus, 3, RngStreams(seed))
            counts = np.zeros(4, dtype=int)
            for i in picked:
                counts[int(corpus.train[i][1])] += 1
            assert np.all(counts == 3)
            assert len(set(picked)) == len(picked)

    def test_n_way_insufficient_class_names_the_class(self):
        # class 1 has 4 examples, ask for 5
        train = tuple((np.zeros(2), y) for y in [0] * 5 + [1] * 4)
        corpus = LanguageCorpus(
            lang_id="t", script_tag="s", role="target", task="classification",
            num_classes=2, input_dim=2, train=train,
        )
        with pytest.raises(ContractViolation, match=r"class 1: 4 < 5"):
            sample_n_way_k_shot(corpus, 5, RngStreams(0))

    def test_bank_identical_across_strategy_agnostic_calls(self):
        targets = [make_cls_corpus(lang_id=f"t{i}", seed=i, n_train=30) for i in range(4)]
        banks = [build_shot_bank(targets, 5, "k_shot", RngStreams(7)) for _ in range(3)]
        assert banks[0] == banks[1] == banks[2]


class TestOracleBank:
    def test_oracle_equals_shots_index_for_index(self):
        targets = [make_cls_corpus(lang_id=f"t{i}", seed=i) for i in range(3)]
        shots = build_shot_bank(targets, 4, "k_shot", RngStreams(1))
        oracle = build_oracle_bank(shots, targets)
        for lang in shots.lang_ids:
            assert oracle.indices(lang) == shots.indices(lang)
            for j, i in enumerate(shots.indices(lang)):
                by_id = {c.lang_id: c for c in targets}
                x_expected, y_expected = by_id[lang].train[i]
                x_got, y_got = oracle.examples(lang)[j]
                assert np.array_equal(x_got, x_expected)
                assert y_got == y_expected

    def test_empty_target_set_gives_empty_bank(self):
        shots = build_shot_bank([], 5, "k_shot", RngStreams(0))
        oracle = build_oracle_bank(shots, [])
        assert len(oracle) == 0

    def test_views_are_immutable(self):
        targets = [make_cls_corpus()]
        shots = build_shot_bank(targets, 3, "k_shot", RngStreams(2))
        oracle = build_oracle_bank(shots, targets)
        x, _ = oracle.examples("t")[0]
        with pytest.raises(ValueError):
            x[0] = 99.0
        assert isinstance(oracle.indices("t"), tuple)


class TestMixedDataset:
    def test_zero_targets_degenerates_to_source(self):
        source = make_cls_corpus(lang_id="s", role="source", n_train=12)
        md = build_mixed_dataset(source, [], None)
        assert len(md) == 12
        assert md.source_size == 12
        assert set(md.lang_of) == {"s"}

    def test_pool_size_arithmetic(self, bench):
        corpora, _ = bench
        source = next(c for c in corpora if c.role == "source")
        targets = [c for c in corpora if c.role == "target"]
        shots = build_shot_bank(targets, 5, "k_shot", RngStreams(1))
        md = build_mixed_dataset(source, targets, shots)
        assert len(md) == 500 + 6 * 5

    def test_same_seed_epoch_identical_batches(self):
        source = make_cls_corpus(lang_id="s", role="source", n_train=20)
        md = build_mixed_dataset(source, [], None)
        a = batch_iter(md, 8, epoch=3, rng=RngStreams(5))
        b = batch_iter(md, 8, epoch=3, rng=RngStreams(5))
        assert len(a) == len(b) == 3  # short final batch kept
        for ba, bb in zip(a, b):
            assert ba.keys == bb.keys

    def test_epoch_batches_partition_pool(self):
        source = make_cls_corpus(lang_id="s", role="source", n_train=23)
        md = build_mixed_dataset(source, [], None)
        for epoch in (1, 2, 5):
            batches = batch_iter(md, 4, epoch=epoch, rng=RngStreams(9))
            seen = [k for b in batches for k in b.keys]
            assert sorted(seen) == list(range(23))

    def test_different_epochs_differ(self):
        source = make_cls_corpus(lang_id="s", role="source", n_train=40)
        md = build_mixed_dataset(source, [], None)
        a = [k for b in batch_iter(md, 40, 1, RngStreams(5)) for k in b.keys]
        b = [k for b in batch_iter(md, 40, 2, RngStreams(5)) for k in b.keys]
        assert a != b

    def test_empty_pool_rejected(self):
        with pytest.raises(ContractViolation, match="empty"):
            build_mixed_dataset(None, [], None)

    def test_shots_dataset_subset(self):
        targets = [make_cls_corpus(lang_id=f"t{i}", seed=i) for i in range(3)]
        shots = build_shot_bank(targets, 2, "k_shot", RngStreams(1))
        md = shots_dataset(targets, shots, only=["t1"])
        assert len(md) == 2
        assert set(md.lang_of) == {"t1"}


class TestIngestTsv:
    def test_empty_file_is_valid(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("", encoding="utf-8")
        corpus = ingest_tsv(p, "classification", lang_id="x")
        assert len(corpus.train) == 0

    def test_three_rows_dim_two(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("1.0\t2.0\t0\n3.0\t4.0\t1\n5.0\t6.0\t2\n", encoding="utf-8")
        corpus = ingest_tsv(p, "classification", lang_id="x")
        assert len(corpus.train) == 3
        assert corpus.input_dim == 2
        assert np.array_equal(corpus.train[1][0], [3.0, 4.0])
        assert corpus.train[2][1] == 2

    def test_crlf_equals_lf(self, tmp_path):
        lf = tmp_path / "lf.tsv"
        crlf = tmp_path / "crlf.tsv"
        lf.write_text("1.0\t0\n2.0\t1\n", encoding="utf-8")
        crlf.write_bytes(b"1.0\t0\r\n2.0\t1\r\n")
        a = ingest_tsv(lf, "classification", lang_id="x")
        b = ingest_tsv(crlf, "classification", lang_id="x")
        assert len(a.train) == len(b.train)
        for ea, eb in zip(a.train, b.train):
            assert np.array_equal(ea[0], eb[0]) and ea[1] == eb[1]

    def test_ragged_row_reports_line_number(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("1.0\t2.0\t0\n1.0\t1\n", encoding="utf-8")
        with pytest.raises(ContractViolation, match="line 2"):
            ingest_tsv(p, "classification", lang_id="x")

    def test_unknown_label(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("1.0\tcat\n", encoding="utf-8")
        with pytest.raises(ContractViolation, match="unknown label 'cat'"):
            ingest_tsv(p, "classification", lang_id="x")

    def test_label_above_num_classes(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("1.0\t5\n", encoding="utf-8")
        with pytest.raises(ContractViolation, match="unknown label"):
            ingest_tsv(p, "classification", lang_id="x", num_classes=3)

    def test_token_tags_sequences(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text(
            "1.0\t0.0\t1\n0.0\t1.0\t0\n\n2.0\t2.0\t2\n",
            encoding="utf-8",
        )
        corpus = ingest_tsv(p, "token_tags", lang_id="x")
        assert len(corpus.train) == 2
        x0, y0 = corpus.train[0]
        assert x0.shape == (2, 2)
        assert list(y0) == [1, 0]
        x1, y1 = corpus.train[1]
        assert x1.shape == (1, 2)
        assert list(y1) == [2]

    def test_merge_splits(self, tmp_path):
        train = tmp_path / "train.tsv"
        dev = tmp_path / "dev.tsv"
        train.write_text("1.0\t0\n", encoding="utf-8")
        dev.write_text("2.0\t1\n3.0\t1\n", encoding="utf-8")
        merged = merge_splits(
            ingest_tsv(train, "classification", lang_id="x", split="train"),
            ingest_tsv(dev, "classification", lang_id="x", split="dev"),
        )
        assert len(merged.train) == 1 and len(merged.dev) == 2
