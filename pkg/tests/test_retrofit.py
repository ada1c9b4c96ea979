from collections import OrderedDict

import numpy as np
import pytest

from revlm.blocks import TwoStep, baseline_step
from revlm.data import corpus_from_text, sample_batch
from revlm.engine import forward_stored, train_step
from revlm.exceptions import DivergenceError, InvalidConfigError, NotInvertibleError
from revlm.gradcheck import check_gradient
from revlm.numerics import Rng, relative_error
from revlm.optim import AdamWConfig, AdamWState
from revlm.retrofit import (
    RetrofitConfig, RetrofitReport, RetrofitRule, convert, estimate_prev, evaluate,
    fixed_point_estimate, kl_finetune, layer_state_errors, linear_error_bound, report_summary,
    retrofit_inverse, retrofit_step, write_report_csv, write_report_summary,
)

OUTPUT_WEIGHTS = ('w_o', 'w_2', 'b_2')


def scaled_updates(model, scale, layers=None):
    """Scales the output weights of every (or the given) layer's update."""
    layers = range(model.config.layers) if layers is None else layers
    named = OrderedDict()
    for name, tensor in model.named_tensors().items():
        parts = name.split('.')
        if parts[0] == 'layers' and int(parts[1]) in layers and parts[2] in OUTPUT_WEIGHTS:
            tensor = tensor * scale
        named[name] = tensor.copy()
    return model.replace_tensors(named)


def random_carrier(rng, config):
    shape = (2, config.context_length, config.width)
    return TwoStep(rng.child(0).normal(shape), rng.child(1).normal(shape))


def test_fixed_point_contracts():
    rng = Rng(5)
    q, _ = np.linalg.qr(rng.normal((6, 6)))
    B = 0.5 * q
    p = rng.child(1).normal(6)
    truth = np.linalg.solve(np.eye(6) + B, p)
    errors = [np.linalg.norm(fixed_point_estimate(p, lambda x: B @ x, k) - truth)
              for k in (1, 2, 3)]
    assert errors[1] <= 0.9 * errors[0]
    assert errors[2] <= 0.9 * errors[1]
    assert errors[2] / errors[1] == pytest.approx(0.5)


def test_fixed_point_divergence():
    p = np.ones(4)
    with pytest.raises(DivergenceError):
        fixed_point_estimate(p, lambda x: 3.0 * x, 10)
    with pytest.raises(InvalidConfigError):
        fixed_point_estimate(p, lambda x: x, 0)


def test_estimate_prev_inverts_residual_step(baseline_model, rng):
    model = scaled_updates(baseline_model, 0.1)
    params, config = model.blocks, model.config
    p_prev = rng.normal((1, 8, 8))
    p_cur = baseline_step(p_prev, params, 2, config)
    errors = [relative_error(estimate_prev(p_cur, params, 2, k, config), p_prev)
              for k in (1, 2, 3)]
    assert errors[2] < errors[1] < errors[0] < 0.1


def test_linear_error_closed_form():
    rng = Rng(17)
    for i in range(1000):
        draw = rng.child(i)
        A = draw.normal((5, 5))
        A *= draw.uniform(0.0, 1.0) / np.linalg.norm(A, 2)
        p = draw.child(1).normal(5)
        a = (1.0 if draw.uniform(0.0, 1.0) < 0.5 else -1.0) + draw.uniform(-0.5, 0.5)
        for skip in ('carrier', 'estimate'):
            report = linear_error_bound(A, a, p, skip=skip)
            assert report.measured == pytest.approx(report.closed_form, abs=1e-12)
            assert report.measured <= report.bound * (1 + 1e-12) + 1e-15


def test_linear_error_blows_up():
    p = np.ones(3) / np.sqrt(3)
    small = linear_error_bound(0.1 * np.eye(3), 1.0, p)
    large = linear_error_bound(2.0 * np.eye(3), 1.0, p)
    assert small.measured == pytest.approx(1e-3)
    assert large.measured == pytest.approx(8.0)
    assert large.measured > np.linalg.norm(p)


def test_asserted_linear_forms_hold_only_at_a_one():
    A = np.array([[0.3]])
    p = np.array([1.0])
    at_one = linear_error_bound(A, 1.0, p)
    assert at_one.measured == pytest.approx(0.027)
    assert at_one.asserted_closed_form == pytest.approx(at_one.measured, abs=1e-15)
    assert at_one.asserted_bound == pytest.approx(0.027)

    off = linear_error_bound(A, 1.0 / 1.09, p)
    assert off.measured == pytest.approx(0.027 / 1.09)
    assert off.measured == pytest.approx(off.closed_form, abs=1e-15)
    assert off.asserted_closed_form == pytest.approx(0.3 * 0.18 / 1.09)
    assert off.asserted_closed_form > 1.5 * off.measured
    assert off.asserted_bound < 1e-12 < off.measured


def test_asserted_closed_form_at_a_one_for_matrices():
    draw = Rng(23)
    A = draw.normal((4, 4))
    A *= 0.8 / np.linalg.norm(A, 2)
    p = draw.child(1).normal(4)
    report = linear_error_bound(A, 1.0, p)
    assert report.asserted_closed_form == pytest.approx(report.measured, abs=1e-12)
    assert report.measured <= report.asserted_bound * (1 + 1e-12)


def test_linear_error_forms_agree_at_a_one():
    A = np.diag([0.3, -0.2])
    p = np.array([1.0, 2.0])
    carrier = linear_error_bound(A, 1.0, p)
    assert carrier.closed_form == pytest.approx(np.linalg.norm(A @ A @ A @ p))
    with pytest.raises(ValueError):
        linear_error_bound(np.zeros((2, 3)), 1.0, p)


def test_rule_rejects_bad_parameters():
    with pytest.raises(InvalidConfigError):
        RetrofitRule(0, 1.0)
    with pytest.raises(InvalidConfigError):
        RetrofitRule(1, 0.0)


def test_retrofit_rule_coefficients():
    rule = RetrofitRule(2, 0.7)
    assert (rule.alpha, rule.beta) == (0.7, pytest.approx(0.3))
    assert RetrofitRule(2, 0.7, skip='estimate').alpha == 0.0


@pytest.mark.parametrize('a,k', [(1.0, 1), (0.6, 2), (-1.2, 3)])
def test_retrofit_inverse(baseline_model, rng, a, k):
    params, config = baseline_model.blocks, baseline_model.config
    carrier = random_carrier(rng, config)
    new = retrofit_step(carrier, params, 2, a, config, k=k)
    recovered = retrofit_inverse(new, params, 2, a, config, k=k)
    assert relative_error(recovered.p_prev, carrier.p_prev) < 1e-12
    assert relative_error(recovered.p_cur, carrier.p_cur) < 1e-12


def test_estimate_skip_is_not_invertible(baseline_model, rng):
    params, config = baseline_model.blocks, baseline_model.config
    rule = RetrofitRule(1, 1.0, skip='estimate')
    new = rule.step(random_carrier(rng, config), params, config)
    with pytest.raises(NotInvertibleError):
        rule.inverse(new, params, config)


@pytest.mark.parametrize('skip', ['carrier', 'estimate'])
def test_retrofit_rule_vjp(baseline_model, rng, skip):
    params, config = baseline_model.blocks, baseline_model.config
    rule = RetrofitRule(2, 0.8, 2, 0.5, skip)
    carrier = random_carrier(rng, config)
    g_prev = rng.child(5).normal(carrier.p_prev.shape)
    g_next = rng.child(6).normal(carrier.p_prev.shape)
    _, cache = rule.forward(carrier, params, config)
    grads = params.zeros_like()
    adjoint = rule.vjp(TwoStep(g_prev, g_next), cache, params, config, grads)

    def objective():
        out = rule.step(carrier, params, config)
        return float(np.sum(out.p_prev * g_prev) + np.sum(out.p_cur * g_next))

    indices = np.arange(0, carrier.p_cur.size, 5)
    assert check_gradient(objective, carrier.p_prev, adjoint.p_prev, indices=indices) < 1e-6
    assert check_gradient(objective, carrier.p_cur, adjoint.p_cur, indices=indices) < 1e-6
    w = params[1].w_1
    assert check_gradient(objective, w, grads[1].w_1,
                          indices=np.arange(0, w.size, max(1, w.size // 10))) < 1e-6


def test_convert_copies_teacher(baseline_model):
    student = convert(baseline_model, RetrofitConfig(a_mode='ones', k_fixed_point=2))
    assert student.config.block_kind == 'retrofit'
    assert student.config.a_schedule == (1.0, 1.0, 1.0)
    assert student.config.retrofit_k == 2
    assert np.array_equal(student.blocks[2].w_q, baseline_model.blocks[2].w_q)
    assert student.blocks[2].w_q is not baseline_model.blocks[2].w_q


def test_convert_rejects_reversible_teacher(midpoint_model):
    with pytest.raises(InvalidConfigError):
        convert(midpoint_model, RetrofitConfig())


def test_config_schedule():
    config = RetrofitConfig(a_seed=4)
    schedule = config.schedule(5)
    assert len(schedule) == 4
    assert schedule == RetrofitConfig(a_seed=4).schedule(5)
    assert all(0.5 <= abs(a) <= 1.5 for a in schedule)
    assert RetrofitConfig(a_schedule=[1.0, -1.0]).schedule(3) == (1.0, -1.0)
    with pytest.raises(InvalidConfigError):
        RetrofitConfig(a_schedule=[1.0]).schedule(4)
    with pytest.raises(InvalidConfigError):
        RetrofitConfig(a_schedule=[1.0, 0.0])
    with pytest.raises(InvalidConfigError):
        RetrofitConfig(k_fixed_point=0)


def test_retrofit_is_exact_when_earlier_updates_vanish(baseline_model, make_batch):
    teacher = scaled_updates(baseline_model, 0.0, layers=range(3))
    student = convert(teacher, RetrofitConfig(a_seed=1))
    tokens, _ = make_batch(teacher.config)
    result = evaluate(teacher, student, [tokens])
    assert result.agreement == 1.0
    assert abs(result.kl) < 1e-12
    assert max(result.layer_errors) < 1e-12


def test_estimate_error_shrinks_with_update_size(baseline_model, make_batch):
    tokens, _ = make_batch(baseline_model.config)
    errors = {}
    for scale in (1.0, 0.1):
        teacher = scaled_updates(baseline_model, scale)
        student = convert(teacher, RetrofitConfig(a_mode='ones'))
        errors[scale] = layer_state_errors(teacher, student, tokens)
    assert len(errors[1.0]) == 3
    for big, small in zip(errors[1.0], errors[0.1]):
        assert small < 0.1 * big


def test_more_iterations_improve_estimate(baseline_model, make_batch):
    tokens, _ = make_batch(baseline_model.config)
    teacher = scaled_updates(baseline_model, 0.05)
    one = layer_state_errors(teacher, convert(teacher, RetrofitConfig(k_fixed_point=1)), tokens)
    three = layer_state_errors(teacher, convert(teacher, RetrofitConfig(k_fixed_point=3)), tokens)
    assert np.mean(three) < np.mean(one)


def test_zero_shot_fidelity_for_small_updates(baseline_model, make_batch):
    teacher = scaled_updates(baseline_model, 0.01)
    student = convert(teacher, RetrofitConfig(a_mode='ones'))
    tokens, _ = make_batch(teacher.config, batch_size=4)
    assert evaluate(teacher, student, [tokens]).agreement >= 0.9


def test_estimate_student_runs_stored(baseline_model, make_batch):
    student = convert(baseline_model, RetrofitConfig(skip='estimate'))
    tokens, _ = make_batch(student.config)
    assert not student.config.reversible
    assert forward_stored(tokens, student).logits.shape == (2, 8, 11)


def test_kl_finetune_reduces_kl(baseline_model, random_state):
    text = ''.join(random_state.choice(list('abcdefgh'), 3000))
    corpus = corpus_from_text(text, 'char')
    student = convert(baseline_model, RetrofitConfig(a_mode='ones'))
    config = RetrofitConfig(a_mode='ones', kl_steps=40, kl_learning_rate=3e-3, batch_size=4,
                            log_interval=0)
    tuned, report = kl_finetune(baseline_model, student, corpus, config, seed=2)
    assert report.kl_post < report.kl_pre
    assert report.kl_reduction > 0
    assert len(report.kl_trace) == 40
    assert report.a_schedule == (1.0, 1.0, 1.0)
    assert tuned.config.a_schedule == student.config.a_schedule
    assert np.array_equal(student.blocks[0].w_q, baseline_model.blocks[0].w_q)
    assert not np.array_equal(tuned.blocks[0].w_q, student.blocks[0].w_q)


@pytest.mark.slow
def test_retrofit_of_trained_baseline(make_model, make_markov_text):
    corpus = corpus_from_text(make_markov_text(20000, seed=1, p_major=0.9), 'char')
    teacher = make_model('baseline', vocab_size=corpus.vocab_size, context_length=16, width=32,
                         heads=2, layers=3, init_std=0.02)
    optimizer = AdamWState(AdamWConfig(learning_rate=3e-3, warmup_steps=20, max_steps=300))
    rng = Rng(0, (2,))
    for i in range(300):
        tokens, targets = sample_batch(corpus.train, 8, 16, rng.child(i))
        teacher = train_step(tokens, targets, teacher, optimizer).model

    config = RetrofitConfig(a_mode='ones', k_fixed_point=3, kl_steps=400, kl_learning_rate=1e-3,
                            seq_len=16, log_interval=0)
    student = convert(teacher, config)
    _, report = kl_finetune(teacher, student, corpus, config, seed=3)
    assert report.agreement_pre >= 0.9
    assert report.kl_reduction >= 0.5


def test_kl_finetune_rejects_vocab_mismatch(baseline_model, make_model, corpus_file):
    student = convert(make_model('baseline', vocab_size=12), RetrofitConfig())
    corpus = corpus_from_text(corpus_file.read(), 'char')
    with pytest.raises(InvalidConfigError):
        kl_finetune(baseline_model, student, corpus, RetrofitConfig(kl_steps=1))


def test_report_validation():
    with pytest.raises(ValueError):
        RetrofitReport([0.1], [-0.1], 1.0, 0.5, 0.9, 0.95)
    with pytest.raises(ValueError):
        RetrofitReport([0.1], [0.1], float('nan'), 0.5, 0.9, 0.95)
    assert RetrofitReport([], [], 0.0, 0.0, 1.0, 1.0).kl_reduction == 0.0


def test_report_writers(tmpdir):
    report = RetrofitReport([0.25, 0.5], [0.125, 0.25], 0.4, 0.2, 0.9, 0.95, (1.0, -0.75))
    assert report.kl_reduction == pytest.approx(0.5)

    csv_path = tmpdir.join("retrofit.csv")
    write_report_csv(str(csv_path), report)
    assert csv_path.read().splitlines() == [
        "layer,err_pre,err_post",
        "1,0.25,0.125",
        "2,0.5,0.25",
    ]

    summary_path = tmpdir.join("retrofit.txt")
    write_report_summary(str(summary_path), report)
    text = summary_path.read()
    assert text == report_summary(report)
    assert "kl_pre=0.4\n" in text
    assert "agreement_post=0.95\n" in text
    assert text.endswith("a_schedule=1.0,-0.75\n")
