//! Scalar training objectives and their gradients at the logit level.
//!
//! Losses reduce per-position terms in 64-bit arithmetic regardless of the
//! logit precision, so metrics are stable and the shadow path stays exact.

use crate::error::{KanacError, Result};
use crate::tensor::Real;

/// Weights of the composite pretraining objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub ntp_weight: f64,
    pub z_coefficient: f64,
}

impl LossSpec {
    pub fn check(&self) -> Result<()> {
        if !self.ntp_weight.is_finite() || !self.z_coefficient.is_finite() {
            return Err(KanacError::validation(
                "loss weights must be finite".to_string(),
            ));
        }
        Ok(())
    }
}

fn check_positions<R: Real>(logits: &[R], vocab: usize, positions: usize) -> Result<()> {
    if vocab == 0 || logits.len() != vocab * positions {
        return Err(KanacError::domain(format!(
            "{} logits do not form {positions} rows of width {vocab}",
            logits.len()
        )));
    }
    Ok(())
}

fn row_log_sum_exp(row: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        max = max.max(v);
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Mean next-token cross-entropy: −log softmax(logits)[target] per position.
pub fn ntp_loss<R: Real>(logits: &[R], vocab: usize, targets: &[u32]) -> Result<f64> {
    check_positions(logits, vocab, targets.len())?;
    let mut total = 0.0f64;
    let mut row = vec![0.0f64; vocab];
    for (chunk, &target) in logits.chunks_exact(vocab).zip(targets) {
        if target as usize >= vocab {
            return Err(KanacError::domain(format!(
                "target id {target} is outside vocab {vocab}"
            )));
        }
        for (r, &v) in row.iter_mut().zip(chunk) {
            *r = v.to_f64();
        }
        total += row_log_sum_exp(&row) - row[target as usize];
    }
    Ok(total / targets.len() as f64)
}

/// Log-partition penalty: coefficient times the mean squared log Z.
pub fn z_loss<R: Real>(logits: &[R], vocab: usize, coefficient: f64) -> Result<f64> {
    if coefficient < 0.0 {
        return Err(KanacError::validation(
            "z-loss coefficient must be >= 0".to_string(),
        ));
    }
    if logits.is_empty() || logits.len() % vocab != 0 {
        return Err(KanacError::domain(format!(
            "{} logits do not form rows of width {vocab}",
            logits.len()
        )));
    }
    let positions = logits.len() / vocab;
    let mut total = 0.0f64;
    let mut row = vec![0.0f64; vocab];
    for chunk in logits.chunks_exact(vocab) {
        for (r, &v) in row.iter_mut().zip(chunk) {
            *r = v.to_f64();
        }
        let z = row_log_sum_exp(&row);
        total += z * z;
    }
    Ok(coefficient * total / positions as f64)
}

/// Mean per-position KL(softmax(teacher/T) || softmax(student/T)).
pub fn kl_loss<R: Real>(teacher: &[R], student: &[R], vocab: usize, temperature: f64) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(KanacError::domain(format!(
            "teacher has {} logits, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(KanacError::validation(
            "temperature must be > 0".to_string(),
        ));
    }
    if teacher.is_empty() || teacher.len() % vocab != 0 {
        return Err(KanacError::domain(format!(
            "{} logits do not form rows of width {vocab}",
            teacher.len()
        )));
    }
    let positions = teacher.len() / vocab;
    let mut total = 0.0f64;
    let mut t_row = vec![0.0f64; vocab];
    let mut s_row = vec![0.0f64; vocab];
    for (t_chunk, s_chunk) in teacher.chunks_exact(vocab).zip(student.chunks_exact(vocab)) {
        for ((t, s), (&tv, &sv)) in t_row.iter_mut().zip(s_row.iter_mut()).zip(t_chunk.iter().zip(s_chunk)) {
            *t = tv.to_f64() / temperature;
            *s = sv.to_f64() / temperature;
        }
        let t_lse = row_log_sum_exp(&t_row);
        let s_lse = row_log_sum_exp(&s_row);
        for (&t, &s) in t_row.iter().zip(&s_row) {
            let log_pt = t - t_lse;
            let log_ps = s - s_lse;
            total += log_pt.exp() * (log_pt - log_ps);
        }
    }
    Ok(total / positions as f64)
}

/// Gradient of `ntp_weight·ntp_loss + z_coefficient-scaled z_loss` w.r.t. the
/// logits, as 32-bit values ready for backpropagation.
pub fn ntp_z_dlogits(
    logits: &[f32],
    vocab: usize,
    targets: &[u32],
    spec: LossSpec,
) -> Result<Vec<f32>> {
    check_positions(logits, vocab, targets.len())?;
    spec.check()?;
    let positions = targets.len() as f64;
    let mut grad = vec![0.0f32; logits.len()];
    let mut row = vec![0.0f64; vocab];
    for ((chunk, out), &target) in logits
        .chunks_exact(vocab)
        .zip(grad.chunks_exact_mut(vocab))
        .zip(targets)
    {
        for (r, &v) in row.iter_mut().zip(chunk) {
            *r = v as f64;
        }
        let lse = row_log_sum_exp(&row);
        for (v, (o, &x)) in out.iter_mut().zip(&row).enumerate() {
            let p = (x - lse).exp();
            let ntp_term = spec.ntp_weight * (p - if v == target as usize { 1.0 } else { 0.0 });
            let z_term = spec.z_coefficient * 2.0 * lse * p;
            *o = ((ntp_term + z_term) / positions) as f32;
        }
    }
    Ok(grad)
}

/// Gradient of `kl_loss` w.r.t. the student logits; the teacher is a constant.
pub fn kl_dlogits(
    teacher: &[f32],
    student: &[f32],
    vocab: usize,
    temperature: f64,
) -> Result<Vec<f32>> {
    if teacher.len() != student.len() || teacher.len() % vocab != 0 {
        return Err(KanacError::domain(format!(
            "teacher/student logit shapes disagree: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    let positions = (teacher.len() / vocab) as f64;
    let mut grad = vec![0.0f32; student.len()];
    let mut t_row = vec![0.0f64; vocab];
    let mut s_row = vec![0.0f64; vocab];
    for ((t_chunk, s_chunk), out) in teacher
        .chunks_exact(vocab)
        .zip(student.chunks_exact(vocab))
        .zip(grad.chunks_exact_mut(vocab))
    {
        for ((t, s), (&tv, &sv)) in t_row.iter_mut().zip(s_row.iter_mut()).zip(t_chunk.iter().zip(s_chunk)) {
            *t = tv as f64 / temperature;
            *s = sv as f64 / temperature;
        }
        let t_lse = row_log_sum_exp(&t_row);
        let s_lse = row_log_sum_exp(&s_row);
        for ((o, &t), &s) in out.iter_mut().zip(&t_row).zip(&s_row) {
            let pt = (t - t_lse).exp();
            let ps = (s - s_lse).exp();
            *o = ((ps - pt) / (temperature * positions)) as f32;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ntp_uniform_logits_is_log_vocab() {
        let logits = vec![0.0f32; 8];
        let loss = ntp_loss(&logits, 4, &[1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ntp_confident_correct_prediction() {
        let logits = vec![10.0f32, 0.0, 0.0, 0.0];
        let loss = ntp_loss(&logits, 4, &[0]).unwrap();
        assert!((loss - 1.3619051494e-4).abs() < 1e-11);
        let closed_form = (3.0 * (-10.0f64).exp()).ln_1p();
        assert!((loss - closed_form).abs() < 1e-15);
    }

    #[test]
    fn ntp_mean_of_two_positions() {
        let a = vec![2.0f32, -1.0, 0.5];
        let b = vec![0.0f32, 3.0, 1.0];
        let la = ntp_loss(&a, 3, &[2]).unwrap();
        let lb = ntp_loss(&b, 3, &[0]).unwrap();
        let both: Vec<f32> = a.iter().chain(&b).copied().collect();
        let lboth = ntp_loss(&both, 3, &[2, 0]).unwrap();
        assert!((lboth - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ntp_rejects_mismatched_shapes() {
        let logits = vec![0.0f32; 8];
        assert!(ntp_loss(&logits, 4, &[0]).is_err());
        assert!(ntp_loss(&logits, 4, &[0, 7]).is_err());
    }

    #[test]
    fn z_loss_zero_logits() {
        let logits = vec![0.0f32; 4];
        let z = z_loss(&logits, 4, 5e-6).unwrap();
        assert!((z - 9.609060278e-6).abs() < 1e-14);
    }

    #[test]
    fn z_loss_zero_coefficient_and_zero_partition() {
        let logits = vec![3.0f32, -1.0, 0.5, 2.0];
        assert_eq!(z_loss(&logits, 4, 0.0).unwrap(), 0.0);

        let centered = vec![-(4.0f64.ln()) as f32; 4];
        let z = z_loss(&centered, 4, 1.0).unwrap();
        assert!(z < 1e-13);
        assert!(z_loss(&logits, 4, -1.0).is_err());
    }

    #[test]
    fn kl_identical_logits_is_zero() {
        let logits = vec![1.5f32, -0.25, 0.0, 2.0, -3.0, 0.5];
        assert_eq!(kl_loss(&logits, &logits, 3, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form_two_outcomes() {
        let teacher = [3.0f64.ln(), 0.0];
        let student = [0.0f64, 0.0];
        let kl = kl_loss(&teacher, &student, 2, 1.0).unwrap();
        assert!((kl - 0.13081203594113712).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_at_high_temperature() {
        let teacher = [1.3f64, -0.7, 0.2, 0.9, -1.1];
        let student = [-0.4f64, 0.8, 1.9, -0.3, 0.1];
        let kl = kl_loss(&teacher, &student, 5, 1e6).unwrap();
        assert!(kl.abs() <= 1e-9);
    }

    #[test]
    fn dlogits_match_finite_differences() {
        let logits = vec![0.4f32, -1.2, 0.9, 2.0, 0.3, -0.6];
        let targets = [2u32, 0];
        let spec = LossSpec { ntp_weight: 0.7, z_coefficient: 3e-3 };
        let grad = ntp_z_dlogits(&logits, 3, &targets, spec).unwrap();
        let h = 1e-4f64;
        for i in 0..logits.len() {
            let mut up: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let f = |l: &[f64]| {
                spec.ntp_weight * ntp_loss(l, 3, &targets).unwrap()
                    + z_loss(l, 3, spec.z_coefficient).unwrap()
            };
            let want = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((grad[i] as f64 - want).abs() < 1e-6, "logit {i}");
        }
    }

    #[test]
    fn kl_dlogits_match_finite_differences() {
        let teacher = vec![0.9f32, -0.3, 1.4, 0.0];
        let student = vec![-0.2f32, 0.7, 0.1, 1.1];
        let temperature = 1.7;
        let grad = kl_dlogits(&teacher, &student, 2, temperature).unwrap();
        let t64: Vec<f64> = teacher.iter().map(|&v| v as f64).collect();
        let h = 1e-4f64;
        for i in 0..student.len() {
            let mut up: Vec<f64> = student.iter().map(|&v| v as f64).collect();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let want = (kl_loss(&t64, &up, 2, temperature).unwrap()
                - kl_loss(&t64, &dn, 2, temperature).unwrap())
                / (2.0 * h);
            assert!((grad[i] as f64 - want).abs() < 1e-6, "logit {i}");
        }

        let same = kl_dlogits(&teacher, &teacher, 2, 1.0).unwrap();
        assert!(same.iter().all(|&g| g == 0.0));
    }
}
