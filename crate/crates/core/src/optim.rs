//! Adaptive-moment optimizer with decoupled weight decay, plus the learning
//! rate schedules used by the training stages.

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tape};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-6 as Real, weight_decay: 0.05 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        let m = params.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        let v = params.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients recorded on `tape`. Parameters
    /// without a gradient still receive weight decay.
    pub fn step(&mut self, params: &mut ParamSet, tape: &Tape, lr: Real) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for id in params.ids() {
            let grad = tape.param_grad(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = params.value_mut(id);
            let zero = vec![0.0; value.len()];
            let g = grad.as_deref().unwrap_or(&zero);
            if g.len() != value.len() {
                return Err(Error::shape("adamw", format!("gradient length {} vs {}", g.len(), value.len())));
            }
            for i in 0..value.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * value[i]);
            }
        }
        Ok(())
    }

    /// Like [`AdamW::step`] but touches only the listed parameters; used
    /// when adapting one submodel while the rest stays frozen.
    pub fn step_filtered(&mut self, params: &mut ParamSet, tape: &Tape, lr: Real, ids: &[ParamId]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for &id in ids {
            let grad = tape.param_grad(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = params.value_mut(id);
            let zero = vec![0.0; value.len()];
            let g = grad.as_deref().unwrap_or(&zero);
            for i in 0..value.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * value[i]);
            }
        }
        Ok(())
    }

    /// Appends optimizer state to a checkpoint archive.
    pub fn save_state(&self, params: &ParamSet, archive: &mut Archive) {
        archive.push("opt/t", &[1], vec![self.t as Real]);
        for (id, e) in params.iter() {
            archive.push(&format!("opt/m/{}", e.name), &e.shape, self.m[id.0].clone());
            archive.push(&format!("opt/v/{}", e.name), &e.shape, self.v[id.0].clone());
        }
    }

    pub fn load_state(&mut self, params: &ParamSet, archive: &Archive) -> Result<()> {
        let (_, t) = archive
            .get("opt/t")
            .ok_or_else(|| Error::Checkpoint("missing opt/t".into()))?;
        self.t = t[0] as u64;
        for (id, e) in params.iter() {
            let (_, m) = archive
                .get(&format!("opt/m/{}", e.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt/m/{}", e.name)))?;
            let (_, v) = archive
                .get(&format!("opt/v/{}", e.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt/v/{}", e.name)))?;
            self.m[id.0] = m.to_vec();
            self.v[id.0] = v.to_vec();
        }
        Ok(())
    }
}

/// Learning-rate schedule for a stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// Constant rate, as used for the tokenizer stage.
    Fixed { rate: Real },
    /// Linear warm-up to `peak` over `warmup` steps, then cosine decay to
    /// zero at `total` steps. Steps count from 1.
    CosineWarmup { peak: Real, warmup: u64, total: u64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> Real {
        match *self {
            LrSchedule::Fixed { rate } => rate,
            LrSchedule::CosineWarmup { peak, warmup, total } => {
                debug_assert!(step >= 1 && step <= total);
                if step <= warmup {
                    peak * step as Real / warmup as Real
                } else {
                    let progress = (step - warmup) as Real / (total - warmup) as Real;
                    peak * 0.5 * (1.0 + (std::f64::consts::PI as Real * progress).cos())
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_weight_decay_with_zero_gradients() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[2], vec![1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());

        // Loss independent of w: gradient is zero, only decay applies.
        let tape = Tape::new();
        let _ = tape.param(&ps, w).unwrap();
        let c = tape.scalar_const(0.0).unwrap();
        tape.backward(c).unwrap();
        let lr = 0.1;
        opt.step(&mut ps, &tape, lr).unwrap();
        let wd = AdamWConfig::default().weight_decay;
        let v = ps.value(w);
        assert!((v[0] - (1.0 - lr * wd)).abs() < 1e-12);
        assert!((v[1] - (-2.0 * (1.0 - lr * wd))).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_boundaries() {
        let s = LrSchedule::CosineWarmup { peak: 1.0, warmup: 10, total: 100 };
        assert!((s.at(1) - 0.1).abs() < 1e-12);
        assert!((s.at(10) - 1.0).abs() < 1e-12);
        assert!(s.at(100).abs() < 1e-12);
        // Monotone nonincreasing after warmup.
        let mut prev = s.at(10);
        for step in 11..=100 {
            let r = s.at(step);
            assert!(r <= prev + 1e-15);
            prev = r;
        }
    }

    #[test]
    fn optimizer_state_roundtrips_through_archive() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let tape = Tape::new();
        let wv = tape.param(&ps, w).unwrap();
        let loss = tape.sum_all(tape.mul(wv, wv).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        opt.step(&mut ps, &tape, 0.01).unwrap();

        let mut archive = Archive::from_params(&ps);
        opt.save_state(&ps, &mut archive);

        let mut opt2 = AdamW::new(&ps, AdamWConfig::default());
        opt2.load_state(&ps, &archive).unwrap();
        assert_eq!(opt2.t, 1);
        assert_eq!(opt2.m[0], opt.m[0]);
        assert_eq!(opt2.v[0], opt.v[0]);
    }
}
