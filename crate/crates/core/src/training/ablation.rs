use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{predict_labels, LossWeights, TrainConfig, Trainer};
use crate::data::synth::{synth_membranes, MembraneSample, DEFAULT_CELLS};
use crate::error::{Error, Result};
use crate::graph::{Network, NetworkConfig};
use crate::metrics::{instances, vrand};

/// Synthetic split and budget for one ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub steps: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub size: usize,
    pub cells: usize,
    pub seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            steps: 300,
            train_images: 20,
            test_images: 5,
            size: 64,
            cells: DEFAULT_CELLS,
            seed: 0,
        }
    }
}

impl AblationSettings {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.train_images == 0 || self.test_images == 0 {
            errs.push("ablate needs at least one train and one test image".to_string());
        }
        if self.size < 4 {
            errs.push(format!("ablate size must be at least 4, got {}", self.size));
        }
        if self.cells < 2 {
            errs.push(format!("ablate cells must be at least 2, got {}", self.cells));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Note printed under every ablation table.
pub const ABLATION_NOTE: &str = "desk-scale synthetic membranes; not comparable to Table 1 values";

fn prefix(n: usize) -> BTreeSet<usize> {
    (1..=n).collect()
}

fn list(n: usize) -> String {
    (1..=n).map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// The ten rows: raw-image injection grown over MSA-1..4 with every ACB
/// context module on, then context modules grown over ACB-1..4 with raw
/// image at MSA-1 and MSA-2.
pub fn ablation_configs(base: &NetworkConfig) -> Result<Vec<(String, NetworkConfig)>> {
    if base.depth < 4 {
        return Err(Error::Config(vec![format!("ablate needs depth >= 4, got {}", base.depth)]));
    }
    let mut rows = Vec::with_capacity(10);
    for n in 0..=4 {
        let mut c = base.clone();
        c.icm_enabled = prefix(base.depth);
        c.msa_raw_image = prefix(n);
        let label = if n == 0 { "C+E+I+D".to_string() } else { format!("C+E+I+D+M({})", list(n)) };
        rows.push((label, c));
    }
    for n in 0..=4 {
        let mut c = base.clone();
        c.msa_raw_image = prefix(2);
        c.icm_enabled = prefix(n);
        let label = if n == 0 { "C+E+M+D".to_string() } else { format!("C+E+M+D+I({})", list(n)) };
        rows.push((label, c));
    }
    for (_, c) in &rows {
        c.validate()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: NetworkConfig,
    pub vrand: f64,
}

/// Mean test Vrand of `net` over membrane samples.
pub fn mean_vrand(net: &Network<f32>, test: &[MembraneSample]) -> Result<f64> {
    let mut total = 0.0;
    for m in test {
        let (h, w) = (m.sample.height(), m.sample.width());
        let pred = predict_labels(net, &m.sample.image)?;
        total += vrand(&instances(&pred, h, w), &m.cells)?;
    }
    Ok(total / test.len() as f64)
}

/// Train and test membrane sets drawn from `settings.seed`.
pub fn membrane_split(settings: &AblationSettings) -> Result<(Vec<MembraneSample>, Vec<MembraneSample>)> {
    let s = settings.size;
    let draw = |offset: u64, n: usize| -> Result<Vec<MembraneSample>> {
        (0..n as u64)
            .map(|i| synth_membranes(settings.seed.wrapping_add(offset + i), s, s, settings.cells))
            .collect()
    };
    Ok((draw(1_000, settings.train_images)?, draw(1_000_000, settings.test_images)?))
}

/// Trains every row from the same seed on the same data and scores it.
/// `on_row` sees each finished row.
pub fn run_ablation(
    base: &NetworkConfig,
    train: &TrainConfig,
    weights: LossWeights,
    settings: &AblationSettings,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    settings.validate()?;
    let (train_set, test_set) = membrane_split(settings)?;
    let samples: Vec<_> = train_set.into_iter().map(|m| m.sample).collect();
    let cfg = TrainConfig {
        steps: settings.steps,
        ..*train
    };
    let mut rows = Vec::with_capacity(10);
    for (label, config) in ablation_configs(base)? {
        let net = Network::new(config.clone(), train.seed)?;
        let mut trainer = Trainer::new(net, cfg, weights)?;
        trainer.run(&samples, |_, _| Ok(()))?;
        let row = AblationRow {
            label,
            config,
            vrand: mean_vrand(&trainer.net, &test_set)?,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Two-column text table with the note underneath.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(13);
    let mut out = format!("{:<width$}  Vrand\n", "configuration");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:.4}\n", r.label, r.vrand));
    }
    out.push_str(&format!("note: {ABLATION_NOTE}\n"));
    out
}
