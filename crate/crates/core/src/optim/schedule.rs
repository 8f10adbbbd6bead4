use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayType {
    Linear,
    Constant,
    Rsqrt,
}

impl std::str::FromStr for DecayType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DecayType::Linear),
            "constant" => Ok(DecayType::Constant),
            "rsqrt" => Ok(DecayType::Rsqrt),
            other => Err(Error::Config(format!("unknown decay type `{other}` (linear|constant|rsqrt)"))),
        }
    }
}

/// Warmup, then a main phase, then an optional linear cooldown to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub decay_type: DecayType,
    #[serde(default = "default_timescale")]
    pub timescale: u64,
    /// `None` for an open-ended schedule (constant or rsqrt without cooldown).
    #[serde(default)]
    pub total_steps: Option<u64>,
    #[serde(default)]
    pub cooldown_steps: u64,
}

fn default_timescale() -> u64 {
    10_000
}

impl ScheduleConfig {
    /// Reciprocal square-root schedule of the reference large-scale run.
    pub fn reference() -> Self {
        ScheduleConfig {
            base_lr: 8e-4,
            warmup_steps: 10_000,
            decay_type: DecayType::Rsqrt,
            timescale: 10_000,
            total_steps: Some(1_000_000),
            cooldown_steps: 50_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.decay_type == DecayType::Rsqrt && self.timescale == 0 {
            return Err(Error::Config("rsqrt schedule needs timescale > 0".into()));
        }
        match self.total_steps {
            Some(total) => {
                if self.warmup_steps + self.cooldown_steps > total {
                    return Err(Error::Config(format!(
                        "warmup ({}) + cooldown ({}) exceed total steps ({total})",
                        self.warmup_steps, self.cooldown_steps
                    )));
                }
                if self.decay_type == DecayType::Linear && total == self.warmup_steps {
                    return Err(Error::Config("linear decay needs total > warmup".into()));
                }
            }
            None => {
                if self.decay_type == DecayType::Linear {
                    return Err(Error::Config("linear decay needs total_steps".into()));
                }
                if self.cooldown_steps > 0 {
                    return Err(Error::Config("cooldown needs total_steps".into()));
                }
            }
        }
        Ok(())
    }

    /// Learning rate at `step`. Zero past the end of a finite schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        if let Some(total) = self.total_steps {
            if step > total {
                return 0.0;
            }
        }
        let warmup = if self.warmup_steps == 0 { 1.0 } else { (s / self.warmup_steps as f64).min(1.0) };
        let main = match self.decay_type {
            DecayType::Constant => 1.0,
            DecayType::Rsqrt => {
                let ts = self.timescale as f64;
                (ts / s.max(ts)).sqrt()
            }
            DecayType::Linear => {
                let total = self.total_steps.unwrap_or(u64::MAX) as f64;
                let w = self.warmup_steps as f64;
                ((total - s) / (total - w)).min(1.0)
            }
        };
        let cooldown = match self.total_steps {
            Some(total) if self.cooldown_steps > 0 && step + self.cooldown_steps > total => {
                (total - step) as f64 / self.cooldown_steps as f64
            }
            _ => 1.0,
        };
        self.base_lr * warmup * main * cooldown
    }

    /// `step,lr` CSV for steps `0..=last`, every `every` steps.
    pub fn to_csv(&self, last: u64, every: u64) -> String {
        let every = every.max(1);
        let mut out = String::from("step,lr\n");
        let mut step = 0;
        while step <= last {
            out.push_str(&format!("{step},{}\n", self.lr_at(step)));
            step += every;
        }
        out
    }
}
