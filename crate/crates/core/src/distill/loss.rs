//! Distillation objectives, recorded on a tape so gradients come for free.
//!
//! Teacher quantities always enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Cross-entropy only; no teacher.
    None,
    /// CE + α·KL(teacher ‖ student).
    #[default]
    Soft,
    /// CE + α·CE against the teacher's argmax.
    Hard,
    /// CE + α·KL(student ‖ teacher) + β·Σ_tokens MSE(FC_token(student), teacher).
    SoftPatch,
    /// CE + α·MSE on the pre-classifier feature.
    PenultimateMse,
}

/// Which argument of the KL term is the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    TeacherFirst,
    StudentFirst,
}

impl Strategy {
    pub fn kl_direction(self) -> Option<KlDirection> {
        match self {
            Strategy::Soft => Some(KlDirection::TeacherFirst),
            Strategy::SoftPatch => Some(KlDirection::StudentFirst),
            _ => None,
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Strategy::None
    }
}

fn rows_log_softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let k = out.last_dim();
    for r in out.data_mut().chunks_mut(k) {
        kernels::log_softmax_inplace(r);
    }
    out
}

/// Mean cross-entropy of `labels` under `logits`.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    tape.nll(lp, labels)
}

fn check_classes(tape: &Tape<'_>, student: Var, teacher: &Tensor) -> Result<()> {
    let s = tape.shape(student);
    if s.last() != teacher.shape().last() {
        return Err(Error::ClassCount {
            student: *s.last().unwrap_or(&0),
            teacher: teacher.last_dim(),
        });
    }
    if s != teacher.shape() {
        return Err(Error::ShapeMismatch {
            op: "distillation logits",
            lhs: s.to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    Ok(())
}

/// Batch-mean KL divergence between the student's and teacher's softmax.
pub fn kl_term(tape: &mut Tape<'_>, student: Var, teacher: &Tensor, dir: KlDirection) -> Result<Var> {
    check_classes(tape, student, teacher)?;
    let batch = teacher.shape()[0] as f64;
    let lq = rows_log_softmax(teacher);
    let lp = tape.log_softmax(student);
    let summed = match dir {
        KlDirection::TeacherFirst => {
            let q: Vec<f64> = lq.data().iter().map(|v| v.exp()).collect();
            let q = tape.constant(Tensor::new(lq.shape().to_vec(), q)?);
            let lq = tape.constant(lq);
            let diff = tape.sub(lq, lp)?;
            let prod = tape.mul(q, diff)?;
            tape.sum_all(prod)
        }
        KlDirection::StudentFirst => {
            let p = tape.softmax(student);
            let lq = tape.constant(lq);
            let diff = tape.sub(lp, lq)?;
            let prod = tape.mul(p, diff)?;
            tape.sum_all(prod)
        }
    };
    Ok(tape.scale(summed, 1.0 / batch))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.last_dim();
    t.data()
        .chunks(k)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `Σ (a − b)²` over every element, divided by `denom`.
fn squared_error(tape: &mut Tape<'_>, a: Var, b: &Tensor, denom: f64) -> Result<Var> {
    let b = tape.constant(b.clone());
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / denom))
}

/// Sum over tokens of the per-token MSE (mean over width), averaged over the batch.
pub fn patch_term(tape: &mut Tape<'_>, projected: Var, teacher_tokens: &Tensor) -> Result<Var> {
    let s = tape.shape(projected).to_vec();
    let t = teacher_tokens.shape();
    if s.len() != 3 || t.len() != 3 || s[1] != t[1] {
        return Err(Error::TokenCount {
            student: s.get(1).copied().unwrap_or(0),
            teacher: t.get(1).copied().unwrap_or(0),
        });
    }
    if s != t {
        return Err(Error::FeatureWidth {
            student: s[2],
            teacher: t[2],
        });
    }
    squared_error(tape, projected, teacher_tokens, (s[0] * s[2]) as f64)
}

/// Mean over batch and width of the squared feature difference.
pub fn feature_term(tape: &mut Tape<'_>, student: Var, teacher: &Tensor) -> Result<Var> {
    let s = tape.shape(student).to_vec();
    if s != teacher.shape() {
        return Err(Error::FeatureWidth {
            student: *s.last().unwrap_or(&0),
            teacher: teacher.last_dim(),
        });
    }
    squared_error(tape, student, teacher, teacher.numel() as f64)
}

/// Student-side variables a loss may need.
pub struct StudentVars {
    pub logits: Var,
    pub feature: Var,
    /// Patch tokens already mapped through FC_token (soft_patch only).
    pub projected_tokens: Option<Var>,
    /// Feature already mapped through the adapter, if one is used.
    pub adapted_feature: Option<Var>,
}

/// Teacher outputs for the same batch.
pub struct TeacherOutputs<'t> {
    pub logits: &'t Tensor,
    pub feature: Option<&'t Tensor>,
    pub patch_tokens: Option<&'t Tensor>,
}

/// Full objective for `strategy`. The distillation term is skipped when α = 0
/// so strategies reduce exactly to cross-entropy.
pub fn distill_loss(
    tape: &mut Tape<'_>,
    strategy: Strategy,
    s: &StudentVars,
    t: Option<&TeacherOutputs<'_>>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut loss = cross_entropy(tape, s.logits, labels)?;
    let Some(t) = t else {
        if strategy.needs_teacher() && (alpha != 0.0 || (strategy == Strategy::SoftPatch && beta != 0.0)) {
            return Err(Error::Config(format!("strategy {strategy:?} requires a teacher")));
        }
        return Ok(loss);
    };
    let mut add = |tape: &mut Tape<'_>, term: Var, w: f64| -> Result<()> {
        let scaled = tape.scale(term, w);
        loss = tape.add(loss, scaled)?;
        Ok(())
    };
    match strategy {
        Strategy::None => {}
        Strategy::Soft | Strategy::SoftPatch => {
            if alpha != 0.0 {
                let kl = kl_term(tape, s.logits, t.logits, strategy.kl_direction().unwrap())?;
                add(tape, kl, alpha)?;
            }
            if strategy == Strategy::SoftPatch && beta != 0.0 {
                let proj = s
                    .projected_tokens
                    .ok_or_else(|| Error::Config("soft_patch needs projected student tokens".into()))?;
                let tokens = t
                    .patch_tokens
                    .ok_or_else(|| Error::Config("soft_patch needs teacher patch tokens".into()))?;
                let pt = patch_term(tape, proj, tokens)?;
                add(tape, pt, beta)?;
            }
        }
        Strategy::Hard => {
            if alpha != 0.0 {
                check_classes(tape, s.logits, t.logits)?;
                let yt = argmax_rows(t.logits);
                let ce = cross_entropy(tape, s.logits, &yt)?;
                add(tape, ce, alpha)?;
            }
        }
        Strategy::PenultimateMse => {
            if alpha != 0.0 {
                let tf = t
                    .feature
                    .ok_or_else(|| Error::Config("penultimate_mse needs teacher features".into()))?;
                let f = s.adapted_feature.unwrap_or(s.feature);
                let ft = feature_term(tape, f, tf)?;
                add(tape, ft, alpha)?;
            }
        }
    }
    Ok(loss)
}

fn eval_scalar(build: impl FnOnce(&mut Tape<'_>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item())
}

/// CE(y, p) + α·KL(q ‖ p) for plain logits.
pub fn soft_kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], alpha: f64) -> Result<f64> {
    eval_scalar(|tape| {
        let s = tape.constant(student.clone());
        let vars = StudentVars {
            logits: s,
            feature: s,
            projected_tokens: None,
            adapted_feature: None,
        };
        let t = TeacherOutputs {
            logits: teacher,
            feature: None,
            patch_tokens: None,
        };
        distill_loss(tape, Strategy::Soft, &vars, Some(&t), labels, alpha, 0.0)
    })
}

/// CE(p, y) + α·CE(p, argmax q).
pub fn hard_kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], alpha: f64) -> Result<f64> {
    eval_scalar(|tape| {
        let s = tape.constant(student.clone());
        let vars = StudentVars {
            logits: s,
            feature: s,
            projected_tokens: None,
            adapted_feature: None,
        };
        let t = TeacherOutputs {
            logits: teacher,
            feature: None,
            patch_tokens: None,
        };
        distill_loss(tape, Strategy::Hard, &vars, Some(&t), labels, alpha, 0.0)
    })
}

/// CE(p, y) + α·MSE(f_s, f_t).
pub fn penultimate_mse_loss(
    student_logits: &Tensor,
    student_feature: &Tensor,
    teacher_feature: &Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<f64> {
    eval_scalar(|tape| {
        let s = tape.constant(student_logits.clone());
        let f = tape.constant(student_feature.clone());
        let vars = StudentVars {
            logits: s,
            feature: f,
            projected_tokens: None,
            adapted_feature: None,
        };
        let dummy = Tensor::zeros(student_logits.shape());
        let t = TeacherOutputs {
            logits: &dummy,
            feature: Some(teacher_feature),
            patch_tokens: None,
        };
        distill_loss(tape, Strategy::PenultimateMse, &vars, Some(&t), labels, alpha, 0.0)
    })
}

/// CE(p, y) + α·KL(p ‖ q) + β·Σᵢ MSE(FC_token(t_sⁱ), t_tⁱ).
#[allow(clippy::too_many_arguments)]
pub fn patch_kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    student_tokens: &Tensor,
    teacher_tokens: &Tensor,
    fc_token_weight: &Tensor,
    fc_token_bias: &Tensor,
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    eval_scalar(|tape| {
        let s = tape.constant(student_logits.clone());
        let toks = tape.constant(student_tokens.clone());
        let w = tape.constant(fc_token_weight.clone());
        let b = tape.constant(fc_token_bias.clone());
        let proj = tape.linear(toks, w, Some(b))?;
        let vars = StudentVars {
            logits: s,
            feature: s,
            projected_tokens: Some(proj),
            adapted_feature: None,
        };
        let t = TeacherOutputs {
            logits: teacher_logits,
            feature: None,
            patch_tokens: Some(teacher_tokens),
        };
        distill_loss(tape, Strategy::SoftPatch, &vars, Some(&t), labels, alpha, beta)
    })
}
