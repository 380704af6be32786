mod common;

use std::collections::BTreeMap;

use common::*;
use vitprune::data::{accuracy, Dataset, Split};
use vitprune::distill::{
    cosine_lr, finetune, hard_kd_loss, kl_term, patch_kd_loss, patch_term, penultimate_mse_loss, soft_kd_loss,
    warmup_steps, AdamW, DistillConfig, KlDirection, Strategy,
};
use vitprune::model::{build_forward, ArchSpec, ForwardOptions, Model, StartPoint};
use vitprune::{Error, ErrorKind, Tape, Tensor};

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

fn ce(rows: &[&[f64]], labels: &[usize]) -> f64 {
    rows.iter().zip(labels).map(|(r, &y)| -log_softmax(r)[y]).sum::<f64>() / rows.len() as f64
}

fn kl(q: &[&[f64]], p: &[&[f64]]) -> f64 {
    let mut s = 0.0;
    for (a, b) in q.iter().zip(p) {
        let (lq, lp) = (log_softmax(a), log_softmax(b));
        s += lq.iter().zip(&lp).map(|(x, y)| x.exp() * (x - y)).sum::<f64>();
    }
    s / q.len() as f64
}

const S: [&[f64]; 2] = [&[0.3, -1.2, 2.0], &[1.5, 0.1, -0.4]];
const T: [&[f64]; 2] = [&[-0.5, 0.7, 1.1], &[0.2, 2.2, 0.0]];

#[test]
fn soft_loss_closed_form() {
    let got = soft_kd_loss(&Tensor::from_rows(&S), &Tensor::from_rows(&T), &[2, 0], 0.4).unwrap();
    let want = ce(&S, &[2, 0]) + 0.4 * kl(&T, &S);
    assert!((got - want).abs() < 1e-13, "{got} vs {want}");
}

#[test]
fn kl_directions_differ() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&S));
    let t = Tensor::from_rows(&T);
    let a = kl_term(&mut tape, s, &t, KlDirection::TeacherFirst).unwrap();
    let b = kl_term(&mut tape, s, &t, KlDirection::StudentFirst).unwrap();
    assert!((tape.value(a).item() - kl(&T, &S)).abs() < 1e-13);
    assert!((tape.value(b).item() - kl(&S, &T)).abs() < 1e-13);
}

#[test]
fn hard_loss_uses_teacher_argmax() {
    let got = hard_kd_loss(&Tensor::from_rows(&S), &Tensor::from_rows(&T), &[0, 0], 2.0).unwrap();
    let want = ce(&S, &[0, 0]) + 2.0 * ce(&S, &[2, 1]);
    assert!((got - want).abs() < 1e-13);
}

#[test]
fn penultimate_mse_closed_form() {
    let sf = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, -1.0]]);
    let tf = Tensor::from_rows(&[&[0.5, 2.0], &[1.0, 1.0]]);
    let got = penultimate_mse_loss(&Tensor::from_rows(&S), &sf, &tf, &[1, 1], 3.0).unwrap();
    let mse = (0.25 + 0.0 + 1.0 + 4.0) / 4.0;
    assert!((got - (ce(&S, &[1, 1]) + 3.0 * mse)).abs() < 1e-13);
}

#[test]
fn patch_loss_closed_form() {
    // Two samples, two tokens, width 2; FC_token is a fixed non-identity map.
    let st = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
    let tt = Tensor::new(vec![2, 2, 2], vec![0.0; 8]).unwrap();
    let w = Tensor::from_rows(&[&[2.0, 0.0], &[1.0, 1.0]]);
    let b = Tensor::from_vec(vec![0.0, -1.0]);
    let got = patch_kd_loss(&Tensor::from_rows(&S), &Tensor::from_rows(&T), &st, &tt, &w, &b, &[0, 1], 0.5, 2.0).unwrap();
    // Projected tokens: (2,0) (0,0) (4,0) (1,0); squared sums 4+0+16+1 = 21,
    // mean over width (2) then summed over tokens, averaged over batch (2).
    let patch = 21.0 / 4.0;
    let want = ce(&S, &[0, 1]) + 0.5 * kl(&S, &T) + 2.0 * patch;
    assert!((got - want).abs() < 1e-13, "{got} vs {want}");
}

#[test]
fn patch_term_checks_token_count() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::zeros(&[1, 4, 3]));
    let err = patch_term(&mut tape, s, &Tensor::zeros(&[1, 5, 3])).unwrap_err();
    assert!(matches!(err, Error::TokenCount { student: 4, teacher: 5 }));
}

#[test]
fn adamw_two_step_trace() {
    let (lr, wd, g1, g2) = (0.1, 0.01, 0.5, -0.25);
    let mut p = Tensor::from_vec(vec![1.0]);
    let mut opt = AdamW::new(wd);
    for g in [g1, g2] {
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![g]))]);
        opt.step([("w", &mut p)], &grads, lr).unwrap();
    }
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut x = 1.0f64;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in [(1, g1), (2, g2)] {
        x *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    assert!((p.data()[0] - x).abs() < 1e-15);
}

#[test]
fn adamw_refuses_non_finite_gradients() {
    let mut p = Tensor::from_vec(vec![1.0]);
    let mut opt = AdamW::new(0.0);
    let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![f64::NAN]))]);
    assert!(matches!(opt.step([("w", &mut p)], &grads, 0.1), Err(Error::NonFiniteGradient(_))));
    assert_eq!(p.data(), &[1.0]);
    assert_eq!(opt.step, 0);
}

#[test]
fn cosine_schedule_shape() {
    let total = 200;
    let warm = warmup_steps(total, 0.05);
    assert_eq!(warm, 10);
    let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, 1.0, warm)).collect();
    assert_eq!(lrs[0], 0.0);
    assert!(lrs[..=warm].windows(2).all(|w| w[1] > w[0]));
    assert!(lrs[warm..].windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(lrs[warm], 1.0);
    assert_eq!(lrs[total], 0.0);
    assert!((lrs[105] - 0.5).abs() < 1e-12);
}

fn small_data(n: usize, seed: u64, spec: &ArchSpec, classes: usize) -> Dataset {
    let x = images(n, spec, seed);
    let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    Dataset::new(x, labels, classes, Split::Train).unwrap()
}

#[test]
fn zero_epochs_returns_model_unchanged() {
    let m = tiny_vit(40, 8, 2, 2, 2);
    let ds = small_data(8, 1, &m.spec, 3);
    let cfg = DistillConfig {
        epochs: 0,
        ..Default::default()
    };
    let (out, log) = finetune(m.clone(), Some(&m), &ds, None, &cfg, |_| Ok(())).unwrap();
    assert!(log.is_empty());
    assert_eq!(out.fingerprint(), m.fingerprint());
}

#[test]
fn none_equals_soft_with_zero_alpha() {
    let student = tiny_vit(41, 8, 2, 2, 2);
    let teacher = tiny_vit(42, 8, 2, 2, 2);
    let ds = small_data(40, 2, &student.spec, 3);
    let base = DistillConfig {
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    let none = DistillConfig {
        strategy: Strategy::None,
        ..base.clone()
    };
    let soft = DistillConfig {
        strategy: Strategy::Soft,
        alpha: 0.0,
        ..base
    };
    let (a, la) = finetune(student.clone(), None, &ds, None, &none, |_| Ok(())).unwrap();
    let (b, lb) = finetune(student.clone(), Some(&teacher), &ds, None, &soft, |_| Ok(())).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(la, lb);
}

#[test]
fn training_is_reproducible_and_logs_each_epoch() {
    let student = tiny_vit(43, 8, 2, 1, 2);
    let teacher = tiny_vit(44, 8, 2, 2, 2);
    let ds = small_data(24, 3, &student.spec, 3);
    let eval = small_data(12, 4, &student.spec, 3);
    let cfg = DistillConfig {
        epochs: 3,
        batch_size: 8,
        augment_pad: 1,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let (a, log) = finetune(student.clone(), Some(&teacher), &ds, Some(&eval), &cfg, |e| {
        seen.push(e.epoch);
        Ok(())
    })
    .unwrap();
    let (b, _) = finetune(student, Some(&teacher), &ds, Some(&eval), &cfg, |_| Ok(())).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(log.len(), 3);
    assert_eq!(seen.len(), 3);
    assert!(log.iter().all(|e| e.eval_top1.is_some() && e.train_loss.is_finite()));
}

#[test]
fn every_strategy_trains_a_narrower_student() {
    let teacher = tiny_vit(45, 8, 2, 2, 2);
    let student = tiny_vit(46, 4, 2, 1, 2);
    let ds = small_data(16, 5, &teacher.spec, 3);
    for (strategy, adapter) in [
        (Strategy::Soft, false),
        (Strategy::Hard, false),
        (Strategy::SoftPatch, false),
        (Strategy::PenultimateMse, true),
    ] {
        let cfg = DistillConfig {
            strategy,
            feature_adapter: adapter,
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let (out, log) = finetune(student.clone(), Some(&teacher), &ds, None, &cfg, |_| Ok(())).unwrap();
        assert_ne!(out.fingerprint(), student.fingerprint(), "{strategy:?}");
        assert!(log[0].train_loss.is_finite());
        // Only student weights come back; FC_token and the adapter stay internal.
        assert_eq!(out.weights.len(), student.weights.len());
    }
}

#[test]
fn mismatched_feature_width_without_adapter_fails() {
    let teacher = tiny_vit(47, 8, 2, 1, 2);
    let student = tiny_vit(48, 4, 2, 1, 2);
    let ds = small_data(8, 6, &teacher.spec, 3);
    let cfg = DistillConfig {
        strategy: Strategy::PenultimateMse,
        epochs: 1,
        ..Default::default()
    };
    let err = finetune(student, Some(&teacher), &ds, None, &cfg, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::FeatureWidth { .. }), "{err}");
}

#[test]
fn missing_teacher_is_a_config_error() {
    let student = tiny_vit(49, 4, 2, 1, 2);
    let ds = small_data(8, 7, &student.spec, 3);
    let err = finetune(student, None, &ds, None, &DistillConfig::default(), |_| Ok(())).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let teacher = init_vit(ArchSpec::vit(8, 4, 2, 4, 8, 1, 2, 2));
    let student = tiny_vit(50, 8, 2, 1, 2);
    let ds = small_data(8, 8, &student.spec, 3);
    let err = finetune(student, Some(&teacher), &ds, None, &DistillConfig::default(), |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::ClassCount { .. }), "{err}");
}

fn init_vit(spec: ArchSpec) -> Model {
    vitprune::model::init_model(&spec, 0).unwrap()
}

#[test]
fn divergence_returns_last_good_state() {
    let student = tiny_vit(51, 8, 2, 1, 2);
    let ds = small_data(16, 9, &student.spec, 3);
    let cfg = DistillConfig {
        strategy: Strategy::None,
        lr: 1e200,
        warmup_frac: 0.0,
        weight_decay: 0.0,
        epochs: 3,
        batch_size: 4,
        ..Default::default()
    };
    match finetune(student, None, &ds, None, &cfg, |_| Ok(())) {
        Err(e @ Error::Diverged { .. }) => {
            assert_eq!(e.kind(), ErrorKind::Numeric);
            if let Error::Diverged { state, .. } = e {
                assert!(state.weights.iter().all(|(_, t)| t.is_finite()));
            }
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn overfits_a_small_set() {
    let spec = ArchSpec::vit(8, 4, 2, 4, 16, 2, 2, 2);
    let m = vitprune::model::init_model(&spec, 3).unwrap();
    let ds = small_data(32, 10, &spec, 4);
    let cfg = DistillConfig {
        strategy: Strategy::None,
        epochs: 200,
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 32,
        ..Default::default()
    };
    let (out, log) = finetune(m, None, &ds, None, &cfg, |_| Ok(())).unwrap();
    assert!(log.last().unwrap().train_loss < 0.1, "{:?}", log.last());
    assert_eq!(accuracy(&out, &ds, 32).unwrap(), 1.0);
}

#[test]
fn fc_token_gradients_through_the_student() {
    // FD through student forward → FC_token → patch term + KL.
    let student = tiny_vit(52, 4, 2, 1, 2);
    let x = images(2, &student.spec, 1);
    let teacher_logits = rand_tensor(&[2, 3], &mut rng(2));
    let teacher_tokens = rand_tensor(&[2, 4, 6], &mut rng(3));
    let w0 = rand_tensor(&[6, 4], &mut rng(4));
    let b0 = rand_tensor(&[6], &mut rng(5));
    let loss_at = |m: &Model, w: &Tensor, b: &Tensor, grads: bool| -> (f64, Option<(Tensor, Tensor, Tensor)>) {
        let mut tape = Tape::new();
        let img = tape.constant(x.clone());
        let out =
            build_forward(&mut tape, &m.spec, &m.weights, StartPoint::Image(img), &ForwardOptions::default(), grads)
                .unwrap();
        let (wv, bv) = (tape.param_owned(w.clone()), tape.param_owned(b.clone()));
        let proj = tape.linear(out.patch_tokens, wv, Some(bv)).unwrap();
        let pt = patch_term(&mut tape, proj, &teacher_tokens).unwrap();
        let k = kl_term(&mut tape, out.logits, &teacher_logits, KlDirection::StudentFirst).unwrap();
        let loss = tape.add(pt, k).unwrap();
        let value = tape.value(loss).item();
        if !grads {
            return (value, None);
        }
        let g = tape.backward(loss).unwrap();
        let fc1 = g.get_or_zeros(out.params["blocks.0.mlp.fc1.weight"]);
        (value, Some((g.get_or_zeros(wv), g.get_or_zeros(bv), fc1)))
    };
    let (_, g) = loss_at(&student, &w0, &b0, true);
    let (gw, gb, gfc1) = g.unwrap();
    let h = 1e-6;
    let rel = |a: &[f64], n: &[f64]| {
        let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
        d / s.max(GRAD_FLOOR)
    };
    let numeric = |which: usize, len: usize| -> Vec<f64> {
        (0..len)
            .map(|j| {
                let eval = |delta: f64| {
                    let (mut m, mut w, mut b) = (student.clone(), w0.clone(), b0.clone());
                    match which {
                        0 => w.data_mut()[j] += delta,
                        1 => b.data_mut()[j] += delta,
                        _ => m.weights.get_mut("blocks.0.mlp.fc1.weight").unwrap().data_mut()[j] += delta,
                    }
                    loss_at(&m, &w, &b, false).0
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    };
    assert!(rel(gw.data(), &numeric(0, gw.numel())) < 1e-5);
    assert!(rel(gb.data(), &numeric(1, gb.numel())) < 1e-5);
    assert!(rel(gfc1.data(), &numeric(2, gfc1.numel())) < 1e-5);
}
