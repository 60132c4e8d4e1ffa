use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ForwardOutputs;
use crate::tensor::{LabelMap, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the summed side losses.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_finite() && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(vec![format!("lambda must be finite and >= 0, got {}", self.lambda)]))
        }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    /// Cross-entropy of the final output.
    pub lp: T,
    /// Side cross-entropies, ACB-1..ACB-depth then AEB-1..AEB-depth.
    pub ls: Vec<T>,
    pub lambda: T,
    /// `lp + lambda * (((0 + ls[0]) + ls[1]) + ...)`, as recorded on the tape.
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn is_finite(&self) -> bool {
        self.lp.is_finite() && self.total.is_finite() && self.ls.iter().all(|v| v.is_finite())
    }

    /// `step  lp  ls_1 .. ls_M  total`, tab-separated.
    pub fn trace_line(&self, step: usize) -> String {
        let mut fields = vec![step.to_string(), self.lp.to_string()];
        fields.extend(self.ls.iter().map(|v| v.to_string()));
        fields.push(self.total.to_string());
        fields.join("\t")
    }
}

/// Records `L = Lp + lambda * sum(Ls)` on the tape and returns the total's
/// handle with its breakdown. `mask` excludes pixels from every term.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutputs,
    labels: &LabelMap,
    weights: LossWeights,
    mask: Option<&[bool]>,
    expected_sides: usize,
) -> Result<(Var, LossBreakdown<T>)> {
    if out.side_logits.len() != expected_sides {
        return Err(Error::Usage(format!(
            "network produced {} side outputs, loss expects {expected_sides}",
            out.side_logits.len()
        )));
    }
    let lp = tape.softmax_cross_entropy(out.final_logits, labels, mask)?;
    let ls = out
        .side_logits
        .iter()
        .map(|&s| tape.softmax_cross_entropy(s, labels, mask))
        .collect::<Result<Vec<_>>>()?;
    let sum = tape.sum_scalars(&ls)?;
    let lambda = T::lit(weights.lambda);
    let total = tape.add_scaled(lp, sum, lambda)?;
    let breakdown = LossBreakdown {
        lp: tape.value(lp).item(),
        ls: ls.iter().map(|&v| tape.value(v).item()).collect(),
        lambda,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}
