use std::f64::consts::PI;

use crate::kv::{self, KvMap};

use super::TrainError;

/// Token-budget batching, the two-stage sequence length, and optimizer
/// hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub batch_token_budget: usize,
    pub seq_len_initial: usize,
    pub seq_len_extended: usize,
    /// The extended length applies once this many tokens have been trained.
    pub switch_threshold_tokens: u64,
    pub total_tokens: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Cosine decay ends at `lr · min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub eval_every_steps: u64,
    pub grad_accum: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            batch_token_budget: 8192,
            seq_len_initial: 128,
            seq_len_extended: 256,
            switch_threshold_tokens: 1_000_000,
            total_tokens: 200 * 8192,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            min_lr_ratio: 0.1,
            eval_every_steps: 50,
            grad_accum: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.seq_len_initial == 0 || self.seq_len_extended < self.seq_len_initial {
            return fail("need 0 < seq_len_initial <= seq_len_extended");
        }
        if self.batch_token_budget < self.seq_len_extended {
            return fail("batch_token_budget must hold at least one sequence of seq_len_extended");
        }
        if self.total_tokens == 0 || self.eval_every_steps == 0 || self.grad_accum == 0 {
            return fail("total_tokens, eval_every_steps and grad_accum must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return fail("adam_eps and grad_clip must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail("warmup_frac and min_lr_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn seq_len_at(&self, tokens_seen: u64) -> usize {
        if tokens_seen >= self.switch_threshold_tokens {
            self.seq_len_extended
        } else {
            self.seq_len_initial
        }
    }

    /// Sequences per step and tokens they consume at `tokens_seen`.
    pub fn batch_at(&self, tokens_seen: u64) -> (usize, usize) {
        let t = self.seq_len_at(tokens_seen);
        let n = self.batch_token_budget / t;
        (n, n * t)
    }

    /// Steps needed to train on `total_tokens`, following the length switch.
    pub fn total_steps(&self) -> u64 {
        let mut seen = 0u64;
        let mut steps = 0u64;
        while seen < self.total_tokens {
            if seen >= self.switch_threshold_tokens {
                let per = self.batch_at(seen).1 as u64;
                return steps + (self.total_tokens - seen).div_ceil(per);
            }
            seen += self.batch_at(seen).1 as u64;
            steps += 1;
        }
        steps
    }

    /// Learning rate for the 0-based `step`: linear warmup over
    /// `ceil(warmup_frac · total)` steps, then cosine to `lr · min_lr_ratio`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps().max(1);
        let warmup = ((self.warmup_frac * total as f64).ceil() as u64).max(1);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (PI * progress).cos())
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        let mut put = |k: &str, v: String| kv::put(map, &format!("{prefix}{k}"), v);
        put("batch_token_budget", self.batch_token_budget.to_string());
        put("seq_len_initial", self.seq_len_initial.to_string());
        put("seq_len_extended", self.seq_len_extended.to_string());
        put("switch_threshold_tokens", self.switch_threshold_tokens.to_string());
        put("total_tokens", self.total_tokens.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("warmup_frac", self.warmup_frac.to_string());
        put("min_lr_ratio", self.min_lr_ratio.to_string());
        put("eval_every_steps", self.eval_every_steps.to_string());
        put("grad_accum", self.grad_accum.to_string());
    }

    pub fn take_kv(map: &mut KvMap, prefix: &str) -> Result<Self, TrainError> {
        let d = Self::default();
        let k = |name: &str| format!("{prefix}{name}");
        let s = Self {
            batch_token_budget: kv::take_or(map, &k("batch_token_budget"), d.batch_token_budget)?,
            seq_len_initial: kv::take_or(map, &k("seq_len_initial"), d.seq_len_initial)?,
            seq_len_extended: kv::take_or(map, &k("seq_len_extended"), d.seq_len_extended)?,
            switch_threshold_tokens: kv::take_or(map, &k("switch_threshold_tokens"), d.switch_threshold_tokens)?,
            total_tokens: kv::take_or(map, &k("total_tokens"), d.total_tokens)?,
            lr: kv::take_or(map, &k("lr"), d.lr)?,
            beta1: kv::take_or(map, &k("beta1"), d.beta1)?,
            beta2: kv::take_or(map, &k("beta2"), d.beta2)?,
            adam_eps: kv::take_or(map, &k("adam_eps"), d.adam_eps)?,
            weight_decay: kv::take_or(map, &k("weight_decay"), d.weight_decay)?,
            grad_clip: kv::take_or(map, &k("grad_clip"), d.grad_clip)?,
            warmup_frac: kv::take_or(map, &k("warmup_frac"), d.warmup_frac)?,
            min_lr_ratio: kv::take_or(map, &k("min_lr_ratio"), d.min_lr_ratio)?,
            eval_every_steps: kv::take_or(map, &k("eval_every_steps"), d.eval_every_steps)?,
            grad_accum: kv::take_or(map, &k("grad_accum"), d.grad_accum)?,
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_len_switch() {
        let s = TrainSchedule::default();
        assert_eq!(s.seq_len_at(0), 128);
        assert_eq!(s.seq_len_at(999_999), 128);
        assert_eq!(s.seq_len_at(1_000_000), 256);
        let never = TrainSchedule {
            switch_threshold_tokens: 10 * s.total_tokens,
            ..s.clone()
        };
        let used: Vec<usize> = (0..never.total_steps()).map(|i| never.seq_len_at(i * 8192)).collect();
        assert!(used.iter().all(|&t| t == 128));
    }

    #[test]
    fn step_count_follows_the_switch() {
        let s = TrainSchedule {
            batch_token_budget: 100,
            seq_len_initial: 10,
            seq_len_extended: 30,
            switch_threshold_tokens: 250,
            total_tokens: 500,
            ..TrainSchedule::default()
        };
        // 100,200,300 at length 10; then 90 per step: 390, 480, 570
        assert_eq!(s.total_steps(), 6);
        assert_eq!(s.batch_at(300), (3, 90));
        assert_eq!(TrainSchedule::default().total_steps(), 200);
    }

    #[test]
    fn lr_warmup_then_cosine() {
        let s = TrainSchedule {
            total_tokens: 100 * 8192,
            switch_threshold_tokens: u64::MAX,
            ..TrainSchedule::default()
        };
        assert_eq!(s.total_steps(), 100);
        assert!((s.lr_at(0) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(1) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(2) - (0.1 * 3e-4 + 0.5 * 0.9 * 3e-4 * (1.0 + (PI / 99.0).cos()))).abs() < 1e-15);
        assert!((s.lr_at(100) - 3e-5).abs() < 1e-15);
        for w in (1..100).collect::<Vec<u64>>().windows(2) {
            assert!(s.lr_at(w[1]) <= s.lr_at(w[0]));
        }
        let slow = TrainSchedule {
            warmup_frac: 0.1,
            ..s.clone()
        };
        assert!((slow.lr_at(0) - 3e-5).abs() < 1e-15);
        assert!((slow.lr_at(9) - 3e-4).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        for bad in [
            TrainSchedule {
                seq_len_extended: 64,
                ..TrainSchedule::default()
            },
            TrainSchedule {
                batch_token_budget: 100,
                ..TrainSchedule::default()
            },
            TrainSchedule {
                lr: 0.0,
                ..TrainSchedule::default()
            },
            TrainSchedule {
                beta2: 1.0,
                ..TrainSchedule::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn kv_round_trip() {
        let s = TrainSchedule {
            lr: 0.01,
            grad_accum: 4,
            ..TrainSchedule::default()
        };
        let mut map = KvMap::new();
        s.write_kv(&mut map, "train.");
        assert_eq!(TrainSchedule::take_kv(&mut map, "train.").unwrap(), s);
        assert!(map.is_empty());
    }
}
