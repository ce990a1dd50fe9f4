use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::ModelParams;
use crate::{Error, Result};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

/// EMA copy of the student. Never touched by gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub decay: f64,
    pub iteration: usize,
}

impl TeacherState {
    /// Starts as an exact copy of the student.
    pub fn from_student(student: &ModelParams, decay: f64) -> Self {
        Self {
            params: student.clone(),
            decay,
            iteration: 0,
        }
    }
}

/// Every teacher scalar, running statistics included, becomes
/// `decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &mut TeacherState, student: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Parameter(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    if teacher.params.arch != student.arch {
        return Err(Error::Structural("teacher and student architectures differ".into()));
    }
    let src = student.flatten(|_, _| true);
    let mut offset = 0;
    let mut mismatch = false;
    teacher.params.visit_mut(&mut |_, _, t| {
        match src.get(offset..offset + t.len()) {
            Some(s) => {
                for (a, &b) in t.iter_mut().zip(s) {
                    if *a != b {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                }
            }
            None => mismatch = true,
        }
        offset += t.len();
    });
    if mismatch || offset != src.len() {
        return Err(Error::Structural("teacher and student tensors do not line up".into()));
    }
    teacher.decay = decay;
    teacher.iteration += 1;
    Ok(())
}

/// Adds `N(0, sigma^2)` intensity noise and clips to `[0, 1]`.
pub fn perturb<R: Rng + ?Sized>(x: &Array4<f64>, rng: &mut R, sigma: f64) -> Result<Array4<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(x.mapv(|v| (v + normal.sample(rng)).clamp(0.0, 1.0)))
}

/// Gaussian warm-up `0.1 exp(-5 (1 - k/k_max)^2)`; `k` is clamped to `k_max`.
pub fn consistency_weight(k: usize, k_max: usize) -> Result<f64> {
    if k_max == 0 {
        return Err(Error::Parameter("k_max must be positive".into()));
    }
    let t = 1.0 - k.min(k_max) as f64 / k_max as f64;
    Ok(0.1 * (-5.0 * t * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (ModelParams, ModelParams) {
        let arch = Architecture::new(vec![2, 4], 2);
        (build_model(&arch, 1).unwrap(), build_model(&arch, 2).unwrap())
    }

    #[test]
    fn fixed_point_and_copy() {
        let (s, t) = pair();
        let mut teacher = TeacherState::from_student(&s, 0.99);
        ema_update(&mut teacher, &s, 0.99).unwrap();
        assert_eq!(teacher.params, s);
        let mut teacher = TeacherState::from_student(&t, 0.99);
        ema_update(&mut teacher, &s, 0.0).unwrap();
        assert_eq!(teacher.params, s);
        assert_eq!(teacher.iteration, 1);
    }

    #[test]
    fn scalar_arithmetic() {
        let (mut s, _) = pair();
        s.visit_mut(&mut |_, _, v| v.fill(1.0));
        let mut z = s.clone();
        z.visit_mut(&mut |_, _, v| v.fill(0.0));
        let mut teacher = TeacherState::from_student(&z, 0.99);
        ema_update(&mut teacher, &s, 0.99).unwrap();
        teacher.params.visit(&mut |_, _, _, v| assert!(v.iter().all(|&x| (x - 0.01).abs() < 1e-15)));
    }

    #[test]
    fn bad_decay_and_mismatched_shapes() {
        let (s, _) = pair();
        let mut teacher = TeacherState::from_student(&s, 0.99);
        assert!(matches!(ema_update(&mut teacher, &s, 1.5), Err(Error::Parameter(_))));
        let other = build_model(&Architecture::new(vec![2, 8], 2), 0).unwrap();
        assert!(matches!(ema_update(&mut teacher, &other, 0.5), Err(Error::Structural(_))));
    }

    #[test]
    fn perturbation_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_elem((2, 1, 4, 4), 0.5);
        assert_eq!(perturb(&x, &mut rng, 0.0).unwrap(), x);
        let y = perturb(&x, &mut rng, 2.0).unwrap();
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(perturb(&x, &mut rng, -0.1).is_err());
    }

    #[test]
    fn noise_sd_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_elem((1, 1, 250, 400), 0.5);
        let sigma = 0.05;
        let y = perturb(&x, &mut rng, sigma).unwrap();
        let d: Vec<f64> = y.iter().map(|v| v - 0.5).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - sigma).abs() / sigma < 0.05);
    }

    #[test]
    fn ramp_values() {
        assert_relative_eq!(consistency_weight(100, 100).unwrap(), 0.1);
        assert_relative_eq!(consistency_weight(0, 100).unwrap(), 6.7379e-4, max_relative = 1e-4);
        assert_relative_eq!(consistency_weight(50, 100).unwrap(), 2.8650e-2, max_relative = 1e-4);
        assert_eq!(consistency_weight(500, 100).unwrap(), 0.1);
        assert!(consistency_weight(0, 0).is_err());
    }
}
