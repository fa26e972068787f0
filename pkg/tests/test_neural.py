import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uct.corpus import Alphabet
from uct.neural import (BACKWARD, FORWARD, NeuralError, NoiseConfig, Seq2SeqModel, TrainSchedule, Vocab,
                        add_noise, beam_search, greedy_decode, next_char_dist, sequence_logprob, train_unmt)

SRC, TGT = Alphabet("abc"), Alphabet("xyz ")


def make_model(seed=0, **kw):
    return Seq2SeqModel(Vocab(SRC, TGT), emb_dim=8, hidden_dim=12, seed=seed, **kw).eval()


def zero_output(model):
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.zero_()
    return model


def test_zeroed_output_layer_is_uniform():
    model = zero_output(make_model())
    V = len(TGT)  # EOS in slot 0, then UNK and the characters
    p = next_char_dist(model, [2, 3], [])
    assert p == pytest.approx(np.full(V, 1 / V))
    assert sequence_logprob(model, [2, 3], [2, 3, 4]) == pytest.approx(4 * math.log(V), abs=1e-5)


def test_distribution_sums_to_one():
    model = make_model(1)
    for prefix in ([], [2], [2, 5, 3]):
        p = next_char_dist(model, [2, 3, 4], prefix)
        assert p.sum() == pytest.approx(1.0, abs=1e-6) and (p > 0).all()


def test_sequence_logprob_is_sum_of_steps():
    model = make_model(2)
    x, y = [2, 4, 3], [3, 2, 5]
    total = -sum(math.log(next_char_dist(model, x, y[:t])[y[t]]) for t in range(len(y)))
    total -= math.log(next_char_dist(model, x, y)[0])
    assert sequence_logprob(model, x, y) == pytest.approx(total, abs=1e-4)


def test_padding_does_not_change_scores():
    model = make_model(3)
    xs = [[2], [2, 3, 4, 4, 3], [4, 4]]
    ys = [[3, 4, 5], [2], []]
    with torch.no_grad():
        batched = model.token_logprobs(xs, ys, FORWARD).sum(1)
    single = [-sequence_logprob(model, x, y) for x, y in zip(xs, ys)]
    assert batched.tolist() == pytest.approx(single, abs=1e-5)


def test_empty_input():
    model = make_model()
    assert greedy_decode(model, []) == []
    hyps = beam_search(model, [], beam=3)
    assert hyps[0][0] == [] and hyps[0][1] == pytest.approx(sequence_logprob(model, [], []), abs=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(2, 4), min_size=1, max_size=8), st.integers(0, 5))
def test_greedy_length_cap_and_local_optimality(x, seed):
    model = make_model(seed)
    y = greedy_decode(model, x)
    assert len(y) <= len(x)
    for t, c in enumerate(y):
        p = next_char_dist(model, x, y[:t])
        assert p[c] == pytest.approx(p.max())
    if len(y) < len(x):
        p = next_char_dist(model, x, y)
        assert p[0] == pytest.approx(p.max())


def test_beam_one_matches_greedy_and_scores():
    model = make_model(4)
    x = [2, 3, 3, 4]
    (y, score), = beam_search(model, x, beam=1)
    assert y == greedy_decode(model, x)
    hyps = beam_search(model, x, beam=4)
    assert [s for _, s in hyps] == sorted(s for _, s in hyps)
    for y, s in hyps:
        assert s == pytest.approx(sequence_logprob(model, x, y), abs=1e-4)


def test_output_restricted_to_target_domain():
    model = make_model(5)
    with torch.no_grad():
        lp = model.token_logprobs([[2]], [[2]], BACKWARD)
    assert torch.isfinite(lp).all()
    p = next_char_dist(model, [3, 4], [], BACKWARD)
    assert len(p) == len(SRC)


def test_gradient_check():
    torch.manual_seed(0)
    model = make_model(6).double().train(False)
    xs, ys = [[2, 3, 4], [4, 2]], [[3, 5], [2, 2, 4]]
    loss = model.loss(xs, ys, FORWARD)
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    rng = random.Random(0)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        p = rng.choice(params)
        idx = tuple(rng.randrange(n) for n in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(model.loss(xs, ys, FORWARD))
            p[idx] = orig - h
            down = float(model.loss(xs, ys, FORWARD))
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        if analytic == numeric == 0.0:
            continue
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    assert worst < 1e-4


@pytest.mark.parametrize("tie", [False, True])
def test_checkpoint_roundtrip(tmp_path, tie):
    model = make_model(7, tie_embeddings=tie)
    model.save(tmp_path / "ck")
    back = Seq2SeqModel.load(tmp_path / "ck")
    x = [2, 4, 3]
    assert next_char_dist(back, x, [3]) == pytest.approx(next_char_dist(model, x, [3]), abs=0)
    assert greedy_decode(back, x) == greedy_decode(model, x)


def test_copy_task():
    # A supervised identity mapping is learnable by the architecture.
    alpha = Alphabet("abc")
    model = Seq2SeqModel(Vocab(alpha, alpha), emb_dim=16, hidden_dim=32, seed=0)
    rng = random.Random(0)
    data = [[rng.randint(2, 4) for _ in range(rng.randint(1, 5))] for _ in range(200)]
    opt = torch.optim.Adam(model.parameters(), lr=0.01)
    model.train()
    for step in range(300):
        batch = rng.sample(data, 32)
        loss = model.loss(batch, batch, FORWARD)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    held = [[rng.randint(2, 4) for _ in range(rng.randint(1, 5))] for _ in range(50)]
    correct = sum(greedy_decode(model, x) == x for x in held)
    assert correct >= 45


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(2, 9), max_size=15, unique=True), st.integers(1, 4), st.integers(0, 10**6))
def test_noise_moves_within_window(ids, window, seed):
    out = add_noise(ids, NoiseConfig(drop_prob=0.0, shuffle_window=window), random.Random(seed))
    assert sorted(out) == sorted(ids)
    for i, c in enumerate(ids):
        assert abs(out.index(c) - i) <= window


def test_noise_drop_never_empties():
    out = add_noise(list(range(2, 40)), NoiseConfig(drop_prob=0.5, shuffle_window=1), random.Random(1))
    assert 0 < len(out) < 38
    assert add_noise([5], NoiseConfig(drop_prob=0.99, shuffle_window=1), random.Random(0)) == [5]


def test_schedule_and_config_errors():
    sched = TrainSchedule(anneal_epochs=3, ae_floor=0.25)
    assert [sched.ae_weight(e) for e in range(5)] == pytest.approx([1.0, 0.75, 0.5, 0.25, 0.25])
    with pytest.raises(NeuralError):
        NoiseConfig(drop_prob=1.0)
    with pytest.raises(NeuralError):
        Seq2SeqModel(Vocab(SRC, TGT), hidden_dim=7)
    with pytest.raises(NeuralError):
        train_unmt([], [[2]], SRC, TGT)


def test_train_unmt_runs_and_is_deterministic():
    src = [[2, 3], [3, 4, 2], [4]] * 4
    tgt = [[3, 2], [2, 4, 5], [5]] * 4
    sched = TrainSchedule(max_epochs=2, batch_size=4)
    runs = [train_unmt(src, tgt, SRC, TGT, sched=sched, valid=(src[:3], tgt[:3]), emb_dim=8,
                       hidden_dim=12, seed=3) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert len(runs[0].history) == 2 and math.isfinite(runs[0].history[-1]["loss"])
