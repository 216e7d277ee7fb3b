import math

import numpy as np
import pytest
from pydantic import ValidationError

from mu2.config import SAMPLES_DIR
from mu2.dpo import (
    BigramLM,
    STATES,
    batch_dpo_loss,
    char_ids,
    dpo_loss,
    dpo_loss_grad,
    pair_scores,
    train_policy_dpo,
    transition_counts,
)
from mu2.errors import InvalidInputError
from mu2.models import PreferencePair, SequenceScore
from mu2.storage import load_records


def _score(policy, reference):
    return SequenceScore(logprob_policy=policy, logprob_reference=reference)


def _pair(chosen="No ascites.", rejected="Large ascites.", **extra):
    return PreferencePair(
        question="Is there ascites?", chosen=chosen, rejected=rejected, score_chosen=0.9, score_rejected=0.1, **extra
    )


def test_equal_log_ratios_cost_ln2():
    assert dpo_loss(_score(-3.0, -3.0), _score(-7.0, -7.0)) == pytest.approx(math.log(2.0), abs=1e-12)


def test_loss_matches_closed_form():
    chosen, rejected = _score(-2.0, -4.0), _score(-6.0, -5.0)
    z = 0.3 * ((-2.0 + 4.0) - (-6.0 + 5.0))
    assert dpo_loss(chosen, rejected, 0.3) == pytest.approx(-math.log(1.0 / (1.0 + math.exp(-z))), rel=1e-12)


def test_loss_is_invariant_to_shifting_both_reference_scores():
    chosen, rejected = _score(-2.0, -4.0), _score(-6.0, -5.0)
    shifted = dpo_loss(_score(-2.0, -3.75), _score(-6.0, -4.75))
    assert shifted == dpo_loss(chosen, rejected)


def test_loss_is_stable_for_large_margins():
    big = dpo_loss(_score(0.0, -1000.0), _score(-1000.0, 0.0), 0.4)
    assert big == 0.0 or big < 1e-300
    small = dpo_loss(_score(-1000.0, 0.0), _score(0.0, -1000.0), 0.4)
    assert small == pytest.approx(0.4 * 2000.0)


def test_loss_decreases_as_chosen_policy_rises():
    rejected = _score(-5.0, -5.0)
    losses = [dpo_loss(_score(p, -5.0), rejected) for p in (-6.0, -5.0, -4.0, -3.0)]
    assert losses == sorted(losses, reverse=True)


def test_gradient_signs_and_antisymmetry():
    grads = dpo_loss_grad(_score(-2.0, -4.0), _score(-6.0, -5.0), 0.3)
    assert grads["chosen_policy"] < 0
    assert grads["rejected_policy"] > 0
    assert grads["chosen_policy"] == -grads["chosen_reference"]
    assert grads["rejected_policy"] == -grads["rejected_reference"]
    assert grads["chosen_policy"] == -grads["rejected_policy"]


@pytest.mark.parametrize("beta", [0.1, 0.5, 0.0, 1.0])
def test_beta_outside_open_interval_is_rejected(beta):
    with pytest.raises(InvalidInputError, match="beta"):
        dpo_loss(_score(-1.0, -1.0), _score(-1.0, -1.0), beta)


def test_batch_loss_is_the_mean():
    pairs = [(_score(-3.0, -3.0), _score(-7.0, -7.0)), (_score(-2.0, -4.0), _score(-6.0, -5.0))]
    expected = (dpo_loss(*pairs[0]) + dpo_loss(*pairs[1])) / 2
    assert batch_dpo_loss(pairs) == pytest.approx(expected, rel=1e-15)
    with pytest.raises(InvalidInputError):
        batch_dpo_loss([])


def test_non_finite_log_probabilities_are_rejected():
    with pytest.raises(ValidationError):
        _score(float("nan"), -1.0)
    with pytest.raises(ValidationError):
        _score(-1.0, float("-inf"))


def test_pair_requires_distinct_ordered_responses():
    with pytest.raises(ValidationError):
        _pair(chosen="same", rejected="same")
    with pytest.raises(ValidationError):
        PreferencePair(question="q", chosen="a", rejected="b", score_chosen=0.1, score_rejected=0.9)


def test_char_ids_map_unknown_characters():
    ids = char_ids("aé\n")
    assert ids[0] == ord("a") - 32
    assert ids[1] == STATES - 2
    assert ids[2] == 95


def test_transition_counts_start_from_prompt_tail():
    counts = transition_counts("Q?", "ab")
    assert counts.sum() == 2.0
    assert counts[char_ids("?")[0], char_ids("a")[0]] == 1.0
    assert counts[char_ids("a")[0], char_ids("b")[0]] == 1.0


def test_bigram_logprob_of_uniform_model():
    model = BigramLM(np.zeros((STATES, STATES)))
    assert model.logprob("Q", "abc") == pytest.approx(-3.0 * math.log(STATES))


def test_bigram_fit_prefers_seen_text():
    model = BigramLM.fit([("Q:", "No effusion.")])
    assert model.logprob("Q:", "No effusion.") > model.logprob("Q:", "Xq zkvw jjjj")


def test_pair_scores_prefer_stored_logprobs():
    stored = _pair(chosen_logprobs=_score(-1.0, -2.0), rejected_logprobs=_score(-3.0, -1.0))
    bare = _pair()
    reference = BigramLM.fit([("Is there ascites?", "No ascites.")])
    scored = pair_scores([stored, bare], reference.copy(), reference)
    assert scored[0] == (stored.chosen_logprobs, stored.rejected_logprobs)
    assert scored[1][0].log_ratio == 0.0
    with pytest.raises(InvalidInputError):
        pair_scores([bare])


def test_training_lowers_the_loss():
    pairs = load_records(SAMPLES_DIR / "pairs.jsonl", PreferencePair)
    reference = BigramLM.fit([(p.question, text) for p in pairs for text in (p.chosen, p.rejected)])
    policy, losses = train_policy_dpo(pairs, reference, beta=0.3, steps=20, lr=1.0)
    assert losses[0] == pytest.approx(math.log(2.0), abs=1e-12)
    assert len(losses) == 21
    assert losses[-1] < losses[0]
    assert not np.array_equal(policy.logits, reference.logits)


def test_policy_scores_move_the_loss_in_opposite_directions():
    rng = np.random.default_rng(5)
    for _ in range(100):
        cp, cr, rp, rr = rng.uniform(-20.0, 0.0, size=4)
        beta = float(rng.uniform(0.11, 0.49))
        step = float(rng.uniform(0.01, 1.0))
        base = dpo_loss(_score(cp, cr), _score(rp, rr), beta)
        assert dpo_loss(_score(cp + step, cr), _score(rp, rr), beta) < base
        assert dpo_loss(_score(cp, cr), _score(rp + step, rr), beta) > base

        grads = dpo_loss_grad(_score(cp, cr), _score(rp, rr), beta)
        h = 1e-6
        up = dpo_loss(_score(cp + h, cr), _score(rp, rr), beta)
        down = dpo_loss(_score(cp - h, cr), _score(rp, rr), beta)
        assert np.sign(up - down) == np.sign(grads["chosen_policy"]) == -1
        up = dpo_loss(_score(cp, cr), _score(rp + h, rr), beta)
        down = dpo_loss(_score(cp, cr), _score(rp - h, rr), beta)
        assert np.sign(up - down) == np.sign(grads["rejected_policy"]) == 1
