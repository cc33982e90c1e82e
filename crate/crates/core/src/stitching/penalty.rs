use std::io::Write;

use serde::{Deserialize, Serialize};

use super::stitched::{fit_stitcher, make_stitched, StitchOptions, EVAL_BATCH};
use super::StitchFamily;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::optim::{evaluate, TrainSet};

/// Outcome of stitching one bottom into one top at one cut. Errors are
/// top-1 fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub experiment_id: String,
    pub cut: usize,
    pub family: String,
    pub stitched_error: f64,
    pub stitched_cross_entropy: f64,
    pub top_error: f64,
    /// `None` when the bottom was trained on a different label space.
    pub bottom_error: Option<f64>,
    /// `stitched_error - top_error`.
    pub penalty: f64,
    pub seed: u64,
    /// Digest of the stitcher's training history.
    pub curve_digest: String,
}

const CSV_HEADER: [&str; 7] = [
    "experiment_id",
    "cut",
    "stitched_err",
    "top_err",
    "bottom_err",
    "penalty",
    "seed",
];

pub fn write_penalty_csv<W: Write>(reports: &[PenaltyReport], w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Checkpoint(format!("penalty csv: {e}"));
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        wr.write_record([
            r.experiment_id.clone(),
            r.cut.to_string(),
            r.stitched_error.to_string(),
            r.top_error.to_string(),
            r.bottom_error.map_or_else(String::new, |e| e.to_string()),
            r.penalty.to_string(),
            r.seed.to_string(),
        ])
        .map_err(io)?;
    }
    wr.flush()
        .map_err(|e| Error::Checkpoint(format!("penalty csv: {e}")))
}

/// Test errors of the two endpoints, computed once per pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baselines {
    pub top_error: f64,
    pub bottom_error: Option<f64>,
}

pub fn baselines(
    top: &ModelGraph,
    bottom: &ModelGraph,
    test: &LabeledDataset,
) -> Result<Baselines> {
    let set = TrainSet::new(&test.images, &test.labels)?;
    let top_error = evaluate(&|x| top.infer(x), set, EVAL_BATCH)?.error;
    let bottom_error = if bottom.spec.classes == test.classes {
        Some(evaluate(&|x| bottom.infer(x), set, EVAL_BATCH)?.error)
    } else {
        None
    };
    Ok(Baselines {
        top_error,
        bottom_error,
    })
}

/// Fits a stitcher from `bottom` into `top` at `cut` and scores it on `test`.
pub fn penalty_with(
    top: &ModelGraph,
    bottom: &ModelGraph,
    cut: usize,
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
    opts: &StitchOptions,
    base: Baselines,
) -> Result<PenaltyReport> {
    let mut sm = make_stitched(top, bottom, cut, opts.family, opts.budget.seed)?;
    let history = fit_stitcher(&mut sm, train_ds, opts)?;
    let r = sm.evaluate(test)?;
    Ok(PenaltyReport {
        experiment_id: String::new(),
        cut,
        family: opts.family.label(),
        stitched_error: r.error,
        stitched_cross_entropy: r.cross_entropy,
        top_error: base.top_error,
        bottom_error: base.bottom_error,
        penalty: r.error - base.top_error,
        seed: opts.budget.seed,
        curve_digest: history.digest(),
    })
}

pub fn penalty(
    top: &ModelGraph,
    bottom: &ModelGraph,
    cut: usize,
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
    opts: &StitchOptions,
) -> Result<PenaltyReport> {
    let base = baselines(top, bottom, test)?;
    penalty_with(top, bottom, cut, train_ds, test, opts, base)
}

/// One report per cut in `cuts`, sharing the endpoint evaluations.
pub fn penalty_curve(
    top: &ModelGraph,
    bottom: &ModelGraph,
    cuts: &[usize],
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
    opts: &StitchOptions,
) -> Result<Vec<PenaltyReport>> {
    let base = baselines(top, bottom, test)?;
    cuts.iter()
        .map(|&cut| penalty_with(top, bottom, cut, train_ds, test, opts, base))
        .collect()
}

/// `(P(i, j) + P(j, i)) / 2` for two reports at the same cut.
pub fn symmetrized_penalty(ab: &PenaltyReport, ba: &PenaltyReport) -> Result<f64> {
    if ab.cut != ba.cut {
        return Err(Error::invalid(
            "symmetrized_penalty",
            format!("reports are for cuts {} and {}", ab.cut, ba.cut),
        ));
    }
    Ok((ab.penalty + ba.penalty) / 2.0)
}

/// Stitched models `S_0..S_L` between two networks of one architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    /// One entry per cut, the best over the stitcher seeds tried.
    pub reports: Vec<PenaltyReport>,
    pub max_error: f64,
    pub max_penalty: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Stitches `b`'s bottoms into `a` at every cut. Cut 0 uses the identity
/// map, so `S_0 = A` exactly; other cuts keep the lowest stitched error
/// over `seeds` as the estimate of the infimum. Passes iff every penalty is
/// at most `threshold`.
pub fn connectivity(
    a: &ModelGraph,
    b: &ModelGraph,
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
    opts: &StitchOptions,
    seeds: &[u64],
    threshold: f64,
) -> Result<ConnectivityReport> {
    if a.spec != b.spec {
        return Err(Error::Stitch(
            "connectivity needs two networks of one architecture".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::invalid(
            "connectivity",
            "at least one stitcher seed is needed",
        ));
    }
    let base = baselines(a, b, test)?;
    let mut reports = Vec::with_capacity(a.num_cuts() + 1);
    for cut in 0..=a.num_cuts() {
        let mut best: Option<PenaltyReport> = None;
        for &seed in seeds {
            let mut o = opts.clone();
            o.budget.seed = seed;
            if cut == 0 {
                o.family = StitchFamily::Identity;
            }
            let r = penalty_with(a, b, cut, train_ds, test, &o, base)?;
            if best
                .as_ref()
                .is_none_or(|bst| r.stitched_error < bst.stitched_error)
            {
                best = Some(r);
            }
            if cut == 0 {
                break;
            }
        }
        reports.push(best.expect("at least one seed"));
    }
    let max_error = reports.iter().map(|r| r.stitched_error).fold(0.0, f64::max);
    let max_penalty = reports
        .iter()
        .map(|r| r.penalty)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ConnectivityReport {
        reports,
        max_error,
        max_penalty,
        threshold,
        passed: max_penalty <= threshold,
    })
}
