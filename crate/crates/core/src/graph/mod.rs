//! ACE-Net: a U-shaped encoder/decoder whose contracting blocks carry a
//! dilated-pyramid context branch and whose expansive blocks aggregate
//! several sources, with a side output on every block.

mod config;
mod network;

use std::fmt::Write as _;

pub use config::NetworkConfig;
pub use network::{
    softmax_channels, AcbTensors, AebTensors, BlockTensors, Forward, ForwardOutputs, Network,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::gradcheck::{grad_check_floor, CheckResult};
use crate::tensor::{LabelMap, Real, Shape, Tape, Tensor};

/// Per-block summary table for an `height` x `width` input.
pub fn describe<T: Real>(net: &Network<T>, height: usize, width: usize) -> Result<String> {
    let cfg = net.config();
    let input = Shape::new(1, cfg.in_channels, height, width);
    let mut tape = Tape::new();
    let image = tape.constant(Tensor::zeros(input));
    let (out, _) = net.forward(&mut tape, image)?;

    let block_params = |prefix: &str| -> usize {
        net.params
            .iter()
            .filter(|p| p.name.split('/').next() == Some(prefix))
            .map(|p| p.tensor.len())
            .sum()
    };
    let rates = cfg
        .aspp_rates
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let side = |present: bool| if present { "side head" } else { "" };

    let mut rows: Vec<[String; 4]> = Vec::new();
    for (k, t) in out.blocks.acb.iter().enumerate() {
        let level = k + 1;
        let mut notes = Vec::new();
        if cfg.icm_enabled.contains(&level) {
            notes.push(format!("ICM rates [{rates}]"));
        }
        notes.push(side(t.side_logits.is_some()).to_string());
        rows.push([
            format!("ACB-{level}"),
            tape.shape(t.skip).to_string(),
            block_params(&format!("acb{level}")).to_string(),
            join_notes(notes),
        ]);
    }
    rows.push([
        "bottleneck".into(),
        tape.shape(out.blocks.bottleneck_out).to_string(),
        block_params("bottleneck").to_string(),
        String::new(),
    ]);
    for (k, t) in out.blocks.aeb.iter().enumerate() {
        let i = k + 1;
        let mut sources = vec![
            if i == 1 { "up(bottleneck)".to_string() } else { format!("up(AEB-{})", i - 1) },
            format!("skip(ACB-{})", cfg.aeb_level(i)),
        ];
        if cfg.msa_raw_image.contains(&i) {
            sources.push("raw image".into());
        }
        sources.extend(cfg.dense_sources(i).iter().map(|j| format!("dense(AEB-{j})")));
        rows.push([
            format!("AEB-{i}"),
            tape.shape(t.block_out).to_string(),
            block_params(&format!("aeb{i}")).to_string(),
            join_notes(vec![
                format!("MSA {}", sources.join(" + ")),
                side(t.side_logits.is_some()).to_string(),
            ]),
        ]);
    }
    rows.push([
        "head".into(),
        tape.shape(out.final_logits).to_string(),
        block_params("head").to_string(),
        String::new(),
    ]);

    let header = ["block", "output", "params", "notes"].map(String::from);
    let widths: Vec<usize> = (0..3)
        .map(|c| rows.iter().chain([&header]).map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "ACE-Net depth {} base_width {} classes {} input {}",
        cfg.depth, cfg.base_width, cfg.num_classes, input
    );
    for r in std::iter::once(&header).chain(rows.iter()) {
        let line = format!(
            "{:<w0$}  {:<w1$}  {:>w2$}  {}",
            r[0],
            r[1],
            r[2],
            r[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
        let _ = writeln!(s, "{}", line.trim_end());
    }
    let _ = writeln!(s, "side heads: {}", out.side_logits.len());
    let _ = writeln!(s, "total params: {}", net.params.scalar_count());
    Ok(s)
}

fn join_notes(notes: Vec<String>) -> String {
    notes.into_iter().filter(|n| !n.is_empty()).collect::<Vec<_>>().join("; ")
}

/// Threshold for the whole-network check.
pub const GRAPH_THRESHOLD: f64 = 1e-3;

/// Finite-difference check of the total loss (final plus unweighted side
/// cross-entropies) with respect to every parameter of a depth-2, width-2
/// network on an 8x8 input.
pub fn full_graph_check(seed: u64) -> Result<CheckResult> {
    let net = Network::<f64>::new(NetworkConfig::with_size(2, 2), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut uniform = |shape: Shape| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let image = uniform(Shape::new(1, 1, 8, 8));
    // Zero biases put relus of dead pixels exactly on the kink, and the
    // small head init leaves upstream gradients near difference roundoff.
    let heads = net.side_head_param_names();
    let inputs: Vec<Tensor<f64>> = net
        .params
        .iter()
        .map(|p| {
            if p.name.ends_with("/bias") {
                uniform(p.tensor.shape())
            } else if p.name == "head/weight" || heads.contains(&p.name) {
                Tensor::from_fn(p.tensor.shape(), |i| 10.0 * p.tensor.at(i))
            } else {
                p.tensor.clone()
            }
        })
        .collect();
    let labels = LabelMap::new(1, 8, 8, (0..64).map(|_| rng.random_range(0..2)).collect())?;
    let err = grad_check_floor(
        |tape, vars| {
            let x = tape.constant(image.clone());
            let mut fwd = net.begin_with(tape, vars.to_vec())?;
            let out = fwd.run(x)?;
            let tape = fwd.tape;
            let lp = tape.softmax_cross_entropy(out.final_logits, &labels, None)?;
            let ls = out
                .side_logits
                .iter()
                .map(|&s| tape.softmax_cross_entropy(s, &labels, None))
                .collect::<Result<Vec<_>>>()?;
            let sum = tape.sum_scalars(&ls)?;
            tape.add_scaled(lp, sum, 1.0)
        },
        &inputs,
        1e-5,
        1e-6,
    )?;
    Ok(CheckResult {
        name: "full graph (depth 2, width 2, 8x8)".into(),
        max_rel_error: err,
        threshold: GRAPH_THRESHOLD,
    })
}
