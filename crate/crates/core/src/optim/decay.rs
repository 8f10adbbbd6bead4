use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ParamSet;

/// A parameter-name pattern (full-match regex) and its decay multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDecayRule {
    pub pattern: String,
    pub multiplier: f64,
}

impl WeightDecayRule {
    pub fn new(pattern: impl Into<String>, multiplier: f64) -> Self {
        WeightDecayRule { pattern: pattern.into(), multiplier }
    }
}

/// Head kernel decays 100× harder than every other kernel; biases, norms and
/// embeddings without a `/kernel` suffix are not decayed.
pub fn default_rules() -> Vec<WeightDecayRule> {
    vec![WeightDecayRule::new(".*head/kernel", 100.0), WeightDecayRule::new(".*/kernel", 1.0)]
}

/// Compiled rule list. The first matching rule wins; unmatched names get 0.
#[derive(Debug, Clone)]
pub struct DecayRules {
    rules: Vec<(Regex, f64)>,
}

impl DecayRules {
    pub fn new(rules: &[WeightDecayRule]) -> Result<Self> {
        let rules = rules
            .iter()
            .map(|r| {
                if !(r.multiplier >= 0.0) {
                    return Err(Error::Config(format!("decay multiplier for `{}` must be >= 0", r.pattern)));
                }
                let re = Regex::new(&format!("^(?:{})$", r.pattern))
                    .map_err(|e| Error::Config(format!("bad pattern `{}`: {e}", r.pattern)))?;
                Ok((re, r.multiplier))
            })
            .collect::<Result<_>>()?;
        Ok(DecayRules { rules })
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.rules.iter().find(|(re, _)| re.is_match(name)).map_or(0.0, |(_, m)| *m)
    }
}

/// Decoupled decay, applied after the optimizer step: every matched parameter
/// is scaled by `1 - base_wd · multiplier`. `base_wd` already includes the
/// learning rate.
pub fn decay_params(params: &mut ParamSet, rules: &DecayRules, base_wd: f64) -> Result<()> {
    if !(base_wd >= 0.0) {
        return Err(Error::Config(format!("base weight decay must be >= 0, got {base_wd}")));
    }
    let factors: Vec<f64> = params.names().map(|n| rules.multiplier(n) * base_wd).collect();
    if let Some((name, f)) = params.names().zip(&factors).find(|(_, &f)| f >= 1.0) {
        return Err(Error::Config(format!("decay factor {f} for `{name}` would zero or flip the weights")));
    }
    for ((_, t), f) in params.iter_mut().zip(factors) {
        if f > 0.0 {
            let keep = 1.0 - f;
            t.data_mut().iter_mut().for_each(|x| *x *= keep);
        }
    }
    Ok(())
}
