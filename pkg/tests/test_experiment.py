from patchlens.experiment import ComparisonConfig, make_splits, run_comparison

TINY = ComparisonConfig(n_train=4, n_val=3, n_test=3, epochs=1)


def test_splits_are_distinct_draws():
    s = make_splits(TINY)
    assert {ex.image_id for ex in s.train} == set(range(4))
    assert s.train[0].image.tobytes() != s.val[0].image.tobytes() != s.test[0].image.tobytes()


def test_comparison_is_seed_matched_and_deterministic():
    a = run_comparison(TINY)
    b = run_comparison(TINY)
    assert set(a.results) == {"ntp", "ntp+lll"}
    for mode in a.results:
        assert a.results[mode].metrics == b.results[mode].metrics
        assert 0.05 <= a.results[mode].threshold <= 0.95
    cfg_ntp, cfg_lll = (a.results[m].training.config for m in ("ntp", "ntp+lll"))
    assert cfg_ntp.seed == cfg_lll.seed and cfg_ntp.model == cfg_lll.model
    # same data order and initial weights, so the very first step sees identical NTP loss
    assert a.results["ntp"].training.history[0].l_ntp == a.results["ntp+lll"].training.history[0].l_ntp
    assert "confidence_ratio" in a.table()
