//! Energy scores on classifier logits and per-class energy filtering.

use crate::error::{Error, Result};
use crate::filter::pipeline::keep_lowest_per_class;

/// Which energy formula to evaluate. `Paper` (the default, named after its
/// config value) is the direct sum E(x,f) = −α Σᵢ exp(−fᵢ/α); `LogSumExp`
/// is the classic OOD form −α·log Σᵢ exp(fᵢ/α). Lower means more
/// in-distribution for both under a cross-entropy-trained network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyForm {
    #[default]
    Paper,
    LogSumExp,
}

impl EnergyForm {
    pub fn name(&self) -> &'static str {
        match self {
            EnergyForm::Paper => "paper",
            EnergyForm::LogSumExp => "logsumexp",
        }
    }

    pub fn parse(s: &str) -> Result<EnergyForm> {
        match s {
            "paper" => Ok(EnergyForm::Paper),
            "logsumexp" => Ok(EnergyForm::LogSumExp),
            other => Err(Error::contract(format!("unknown energy form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyScore {
    pub value: f64,
    pub alpha: f64,
}

/// Energy of one logit vector. Numerically stabilized by factoring out the
/// extremal exponent; always negative for finite logits.
pub fn energy_score(logits: &[f32], alpha: f64, form: EnergyForm) -> Result<EnergyScore> {
    if logits.len() < 2 {
        return Err(Error::contract(format!(
            "energy score needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {alpha}"
        )));
    }
    if let Some((i, &bad)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Scoring(format!(
            "non-finite logit {bad} at index {i}"
        )));
    }
    let value = match form {
        EnergyForm::Paper => {
            // -a * sum exp(-f_i/a) = -a * exp(m) * sum exp(-f_i/a - m)
            let m = logits
                .iter()
                .map(|&f| -f as f64 / alpha)
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits
                .iter()
                .map(|&f| (-(f as f64) / alpha - m).exp())
                .sum();
            -alpha * m.exp() * sum
        }
        EnergyForm::LogSumExp => {
            let m = logits
                .iter()
                .map(|&f| f as f64 / alpha)
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|&f| (f as f64 / alpha - m).exp()).sum();
            -alpha * (m + sum.ln())
        }
    };
    Ok(EnergyScore { value, alpha })
}

/// Keep the ⌈N(1−r)⌉ lowest-energy samples per class; ties break on sample
/// id ascending. Returns kept flags aligned with the input order.
pub fn energy_filter(ids: &[u64], classes: &[u16], energies: &[f64], r: f64) -> Result<Vec<bool>> {
    if ids.is_empty() {
        return Err(Error::contract("energy filter on an empty pool"));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::contract(format!(
            "filter ratio must be in [0,1), got {r}"
        )));
    }
    Ok(keep_lowest_per_class(ids, classes, energies, r))
}
