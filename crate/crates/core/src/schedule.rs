//! Linear-β noise schedule, closed-form forward corruption, the ancestral
//! reverse step and the coarse/fine split of the reverse trajectory.
//!
//! Timesteps are 1-based (`1..=T`) and `ᾱ_0 = 1`.

use crate::error::{Error, Result};
use crate::numerics::Element;

/// Which half of the reverse trajectory a timestep belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Early, high-noise steps (`t > boundary`), guided by low frequencies.
    Coarse,
    /// Late steps (`t <= boundary`), guided by high frequencies.
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    phase_boundary: usize,
}

impl NoiseSchedule {
    /// `steps` betas interpolated linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "need at least 2 diffusion steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
            phase_boundary: steps / 2,
        })
    }

    /// Linear schedule whose endpoints are given for `reference_steps` and
    /// rescaled by `reference_steps / steps`, so that shorter chains reach
    /// about the same final noise level as the reference chain.
    pub fn linear_rescaled(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        reference_steps: usize,
    ) -> Result<Self> {
        if steps == 0 || reference_steps == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        let k = reference_steps as f64 / steps as f64;
        Self::linear(steps, beta_start * k, beta_end * k)
    }

    /// Move the coarse/fine split; `boundary` must leave both phases non-empty.
    pub fn with_phase_boundary(mut self, boundary: usize) -> Result<Self> {
        if boundary == 0 || boundary >= self.steps() {
            return Err(Error::Config(format!(
                "phase boundary {boundary} must lie in 1..{}",
                self.steps()
            )));
        }
        self.phase_boundary = boundary;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn phase_boundary(&self) -> usize {
        self.phase_boundary
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Variance of the reverse transition, `(1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let ab = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bar(t - 1)?;
        Ok((1.0 - ab_prev) / (1.0 - ab) * self.betas[t - 1])
    }

    pub fn phase_of(&self, t: usize) -> Result<Phase> {
        self.check_step(t)?;
        Ok(if t > self.phase_boundary {
            Phase::Coarse
        } else {
            Phase::Fine
        })
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
    pub fn forward_sample<T: Element>(&self, x0: &[T], t: usize, eps: &[T]) -> Result<Vec<T>> {
        self.check_step(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Dimension(format!(
                "forward_sample: {} values vs {} noise values",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bars[t - 1];
        let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// One ancestral step:
    /// `x_{t−1} = (x_t − β_t / √(1 − ᾱ_t) · eps_pred) / √a_t + σ_t · z`,
    /// where `σ_t² = posterior_variance(t)`. `z` is ignored at `t = 1`.
    pub fn reverse_step<T: Element>(
        &self,
        xt: &[T],
        t: usize,
        eps_pred: &[T],
        z: &[T],
    ) -> Result<Vec<T>> {
        self.check_step(t)?;
        if xt.len() != eps_pred.len() || (t > 1 && xt.len() != z.len()) {
            return Err(Error::Dimension(format!(
                "reverse_step: lengths {} / {} / {}",
                xt.len(),
                eps_pred.len(),
                z.len()
            )));
        }
        let beta = self.betas[t - 1];
        let inv_sqrt_alpha = 1.0 / self.alphas[t - 1].sqrt();
        let eps_coef = beta / (1.0 - self.alpha_bars[t - 1]).sqrt();
        let sigma = self.posterior_variance(t)?.sqrt();
        let out = xt
            .iter()
            .zip(eps_pred)
            .enumerate()
            .map(|(i, (&x, &e))| {
                let mean = (x.as_f64() - eps_coef * e.as_f64()) * inv_sqrt_alpha;
                let noise = if t > 1 { sigma * z[i].as_f64() } else { 0.0 };
                T::from_f64(mean + noise)
            })
            .collect();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(
            NoiseSchedule::linear(1, 1e-4, 0.02),
            Err(Error::Config(_))
        ));
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.clone().with_phase_boundary(0).is_err());
        assert!(s.clone().with_phase_boundary(10).is_err());
        assert_eq!(s.with_phase_boundary(3).unwrap().phase_boundary(), 3);
    }

    #[test]
    fn default_schedule_endpoints_and_invariants() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.phase_boundary(), 100);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(200).unwrap() - 0.02).abs() < 1e-15);
        for t in 1..=200 {
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
            if t > 1 {
                assert!(b >= s.beta(t - 1).unwrap());
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
        assert!(s.alpha_bar(1).unwrap() < 1.0);
    }

    #[test]
    fn rescaled_schedule_keeps_the_final_noise_level() {
        let reference = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert_eq!(
            NoiseSchedule::linear_rescaled(200, 1e-4, 0.02, 200).unwrap(),
            reference
        );
        let short = NoiseSchedule::linear_rescaled(50, 1e-4, 0.02, 200).unwrap();
        assert!((short.beta(1).unwrap() - 4e-4).abs() < 1e-15);
        assert!((short.beta(50).unwrap() - 0.08).abs() < 1e-15);
        let (a, b) = (
            reference.alpha_bar(200).unwrap(),
            short.alpha_bar(50).unwrap(),
        );
        assert!((a.ln() - b.ln()).abs() / a.ln().abs() < 0.05, "{a} vs {b}");
        assert!(NoiseSchedule::linear_rescaled(2, 1e-4, 0.02, 200).is_err());
        assert!(NoiseSchedule::linear_rescaled(0, 1e-4, 0.02, 200).is_err());
    }

    #[test]
    fn constant_two_step_schedule() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        assert!((s.posterior_variance(2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_independent_product() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        for t in 1..=50 {
            let mut prod = 1.0f64;
            for k in 1..=t {
                prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (k - 1) as f64 / 49.0);
            }
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_at_final_step() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let ab: f64 = (0..200)
            .map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 199.0))
            .product();
        let ab_prev: f64 = (0..199)
            .map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 199.0))
            .product();
        let want = (1.0 - ab_prev) / (1.0 - ab) * 0.02;
        assert!((s.posterior_variance(200).unwrap() - want).abs() < 1e-14);
        assert!(matches!(s.posterior_variance(0), Err(Error::Contract(_))));
        assert!(s.posterior_variance(201).is_err());
    }

    #[test]
    fn forward_sample_branches() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let x0 = [0.5, -0.25, 1.0];
        let eps = [0.3, 1.2, -0.7];
        let t = 9;
        let ab = s.alpha_bar(t).unwrap();
        let noiseless = s.forward_sample(&x0, t, &[0.0; 3]).unwrap();
        for (o, x) in noiseless.iter().zip(&x0) {
            assert!((o - ab.sqrt() * x).abs() < 1e-15);
        }
        let pure = s.forward_sample(&[0.0; 3], t, &eps).unwrap();
        for (o, e) in pure.iter().zip(&eps) {
            assert!((o - (1.0 - ab).sqrt() * e).abs() < 1e-15);
        }
        assert!(matches!(
            s.forward_sample(&x0, 0, &eps),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            s.forward_sample(&x0, 21, &eps),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            s.forward_sample(&x0, 1, &eps[..2]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reverse_step_examples() {
        let s = NoiseSchedule::linear(30, 1e-4, 0.02).unwrap();
        let x0 = [0.9, -0.4, 0.1, 0.0];
        let eps = [1.5, -0.3, 0.2, -2.0];
        let x1 = s.forward_sample(&x0, 1, &eps).unwrap();
        let rec = s.reverse_step(&x1, 1, &eps, &[0.0; 4]).unwrap();
        let err: f64 = rec
            .iter()
            .zip(&x0)
            .map(|(r, x)| (r - x) * (r - x))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = x0.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm <= 1e-10, "{}", err / norm);

        let t = 17;
        let xt = [0.2, -0.6, 1.1, 0.4];
        let zero = s.reverse_step(&xt, t, &[0.0; 4], &[0.0; 4]).unwrap();
        for (o, x) in zero.iter().zip(&xt) {
            assert!((o - x / s.alpha(t).unwrap().sqrt()).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(-1.0, 1.0);
        for t in [2, 15, 30] {
            let xt: Vec<f64> = (0..16).map(|_| u.sample(&mut rng)).collect();
            let ep: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            let got = s.reverse_step(&xt, t, &ep, &z).unwrap();
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 29.0;
            let ab: f64 = (0..t)
                .map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 29.0))
                .product();
            let ab_prev = ab / (1.0 - beta);
            let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
            for i in 0..16 {
                let want = (xt[i] - beta / (1.0 - ab).sqrt() * ep[i]) / (1.0 - beta).sqrt()
                    + var.sqrt() * z[i];
                assert!((got[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase_partition() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.phase_of(200).unwrap(), Phase::Coarse);
        assert_eq!(s.phase_of(1).unwrap(), Phase::Fine);
        assert_eq!(s.phase_of(100).unwrap(), Phase::Fine);
        assert_eq!(s.phase_of(101).unwrap(), Phase::Coarse);
        for steps in [2, 3, 7, 50, 51] {
            let s = NoiseSchedule::linear(steps, 1e-4, 0.02).unwrap();
            let phases: Vec<Phase> = (1..=steps).map(|t| s.phase_of(t).unwrap()).collect();
            let switches = phases.windows(2).filter(|w| w[0] != w[1]).count();
            assert_eq!(switches, 1, "T={steps}");
            assert_eq!(phases[0], Phase::Fine);
            assert_eq!(phases[steps - 1], Phase::Coarse);
        }
    }
}
