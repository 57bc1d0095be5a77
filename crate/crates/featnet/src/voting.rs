//! Majority-vote inference over the trained grid.
//!
//! Classification runs in three steps: every net of the featured model
//! ranks its top m candidates (step 1); each (module, submodule) pools the
//! candidates of its p features and elects a label by vote count (step 2);
//! the submodule winners compete by vote count, with ties broken by the
//! smallest population variance of the p per-feature top losses, then by
//! (module, submodule) order (step 3).

use std::collections::BTreeMap;
use std::io::Write;

use crate::dataset::global_label;
use crate::error::{Error, Result};
use crate::features::{transform_image, RgbImage};
use crate::fnn::{predict_top, PredictionRecord};
use crate::training::{CellId, ProtoModel};

/// Feature counts of the Model-1..Model-6 presets.
pub const MODEL_PRESETS: [usize; 6] = [3, 6, 9, 12, 15, 17];

/// A proto-model restricted to its first `p` features at inference time.
#[derive(Debug, Clone, Copy)]
pub struct FeaturedModel<'a> {
    proto: &'a ProtoModel,
    p: usize,
}

impl<'a> FeaturedModel<'a> {
    pub fn new(proto: &'a ProtoModel, p: usize) -> Result<Self> {
        if p == 0 || p > proto.feature_count() {
            return Err(Error::Config(format!(
                "featured model needs 1..={} features, got {p}",
                proto.feature_count()
            )));
        }
        Ok(Self { proto, p })
    }

    /// Model-1..Model-6: the first 3, 6, 9, 12, 15, 17 catalog features.
    pub fn preset(proto: &'a ProtoModel, model: usize) -> Result<Self> {
        let p = *MODEL_PRESETS
            .get(model.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("model preset {model} outside 1..=6")))?;
        Self::new(proto, p)
    }

    pub fn proto(&self) -> &'a ProtoModel {
        self.proto
    }

    pub fn feature_count(&self) -> usize {
        self.p
    }
}

/// Candidate count per net: 1 reproduces the plain protocol, 3 the
/// expanded top-3 protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protocol {
    pub m: usize,
}

impl Protocol {
    pub fn validate(&self, classes_per_module: u32) -> Result<()> {
        if self.m == 0 || self.m > classes_per_module as usize {
            return Err(Error::Config(format!(
                "protocol m = {} outside 1..={classes_per_module}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Step-1 output: per-cell ranked candidates, labels already global.
pub type RecordTensor = BTreeMap<CellId, Vec<PredictionRecord>>;

/// Runs the image through every net of the featured model. Record labels
/// are translated from module-local to global.
pub fn predict_records(fm: &FeaturedModel, img: &RgbImage, m: usize) -> Result<RecordTensor> {
    let pm = fm.proto();
    let mut tensor = RecordTensor::new();
    for (fi, spec) in pm.features.iter().take(fm.feature_count()).enumerate() {
        let x = transform_image(spec, img)?;
        for j in 1..=pm.k {
            for s in 1..=pm.r {
                let id = CellId {
                    feature: fi + 1,
                    module: j,
                    submodule: s,
                };
                let params = pm.cell_params(id)?;
                let mut records = predict_top(params, &x, m)?;
                for rec in &mut records {
                    rec.label = global_label(j, rec.label, pm.k, pm.label_count);
                }
                tensor.insert(id, records);
            }
        }
    }
    Ok(tensor)
}

/// Step-2 result for one (module, submodule).
#[derive(Debug, Clone, PartialEq)]
pub struct SubmoduleWinner {
    pub module: u32,
    pub submodule: u32,
    pub label: u32,
    /// Features whose candidate list contains the winning label.
    pub votes: u32,
    /// Each feature's smallest candidate loss, in feature order; the
    /// variance of these breaks step-3 ties.
    pub feature_min_losses: Vec<f64>,
}

/// Elects one label from the p candidate lists of a submodule. Vote count
/// ties are broken by the smaller sum of the label's listed losses, then by
/// the smaller label.
pub fn submodule_winner(
    module: u32,
    submodule: u32,
    per_feature: &[&[PredictionRecord]],
) -> Result<SubmoduleWinner> {
    if per_feature.iter().any(|recs| recs.is_empty()) {
        return Err(Error::Domain(format!(
            "submodule ({module}, {submodule}): empty candidate list"
        )));
    }
    let mut tally: BTreeMap<u32, (u32, f64)> = BTreeMap::new();
    for recs in per_feature {
        for rec in *recs {
            let entry = tally.entry(rec.label).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += rec.loss;
        }
    }
    let (&label, &(votes, _)) = tally
        .iter()
        .min_by(|(la, (va, sa)), (lb, (vb, sb))| {
            vb.cmp(va).then(sa.total_cmp(sb)).then(la.cmp(lb))
        })
        .expect("candidate lists are non-empty");
    let feature_min_losses = per_feature
        .iter()
        .map(|recs| {
            recs.iter()
                .map(|r| r.loss)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(SubmoduleWinner {
        module,
        submodule,
        label,
        votes,
        feature_min_losses,
    })
}

/// Population variance (divide by count, not count - 1).
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Step-3 outcome of one classification.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome {
    pub label: u32,
    /// Winning (module, submodule).
    pub winner: (u32, u32),
    pub votes: u32,
    /// The winner was backed by every feature.
    pub super_majority: bool,
    /// The variance rule had to separate vote-count ties.
    pub tie_break_used: bool,
    /// Tie participants that lost, with their loss variances.
    pub tie_losers: Vec<((u32, u32), f64)>,
}

/// Elects the final label among the submodule winners. `p` is the feature
/// count the votes were drawn from.
pub fn majority_vote(winners: &[SubmoduleWinner], p: usize) -> Result<VoteOutcome> {
    if winners.is_empty() {
        return Err(Error::Domain("no submodule winners to vote over".into()));
    }
    let top_votes = winners.iter().map(|w| w.votes).max().unwrap();
    let mut tied: Vec<&SubmoduleWinner> = winners
        .iter()
        .filter(|w| w.votes == top_votes)
        .collect();
    tied.sort_by_key(|w| (w.module, w.submodule));

    let tie_break_used = tied.len() > 1;
    let scored: Vec<(f64, &SubmoduleWinner)> = tied
        .iter()
        .map(|w| (population_variance(&w.feature_min_losses), *w))
        .collect();
    let (_, winner) = scored
        .iter()
        .min_by(|(va, wa), (vb, wb)| {
            va.total_cmp(vb)
                .then((wa.module, wa.submodule).cmp(&(wb.module, wb.submodule)))
        })
        .copied()
        .expect("tied set is non-empty");
    let tie_losers = scored
        .iter()
        .filter(|(_, w)| (w.module, w.submodule) != (winner.module, winner.submodule))
        .map(|(var, w)| ((w.module, w.submodule), *var))
        .collect();
    Ok(VoteOutcome {
        label: winner.label,
        winner: (winner.module, winner.submodule),
        votes: winner.votes,
        super_majority: winner.votes as usize == p,
        tie_break_used,
        tie_losers,
    })
}

/// Steps 2 and 3 over a complete record tensor. The tensor must cover a
/// full rectangular grid of features 1..=p.
pub fn aggregate(tensor: &RecordTensor) -> Result<VoteOutcome> {
    if tensor.is_empty() {
        return Err(Error::Domain("empty record tensor".into()));
    }
    let p = tensor.keys().map(|id| id.feature).max().unwrap();
    let mut groups: BTreeMap<(u32, u32), Vec<&[PredictionRecord]>> = BTreeMap::new();
    for (id, recs) in tensor {
        if id.feature == 0 || id.feature > p {
            return Err(Error::Domain(format!("stray feature index {}", id.feature)));
        }
        groups
            .entry((id.module, id.submodule))
            .or_default()
            .push(recs.as_slice());
    }
    let mut winners = Vec::with_capacity(groups.len());
    for ((j, s), lists) in &groups {
        if lists.len() != p {
            return Err(Error::Domain(format!(
                "submodule ({j}, {s}) has {} of {p} feature records",
                lists.len()
            )));
        }
        winners.push(submodule_winner(*j, *s, lists)?);
    }
    majority_vote(&winners, p)
}

/// Full three-step classification of one image.
pub fn classify(fm: &FeaturedModel, img: &RgbImage, protocol: Protocol) -> Result<VoteOutcome> {
    let pm = fm.proto();
    protocol.validate(pm.label_count / pm.k)?;
    aggregate(&predict_records(fm, img, protocol.m)?)
}

/// Writes a record tensor as `i j s label loss` lines, losses with six
/// fractional digits, in cell order.
pub fn dump_records<W: Write>(mut w: W, tensor: &RecordTensor) -> Result<()> {
    for (id, recs) in tensor {
        for rec in recs {
            writeln!(
                w,
                "{} {} {} {} {:.6}",
                id.feature, id.module, id.submodule, rec.label, rec.loss
            )?;
        }
    }
    Ok(())
}
