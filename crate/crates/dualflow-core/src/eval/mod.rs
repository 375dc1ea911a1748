//! Attack-success evaluation: per-class ASR, transfer tables, input-processing
//! defenses, split confidence intervals, and perturbation-only classification.

mod defense;
mod stats;

pub use defense::{apply_defense, DefenseSpec};
pub use stats::{split_confidence_interval, ConfidenceInterval};

use std::collections::BTreeMap;

use crate::attack::AdvSample;
use crate::error::{CoreError, Result};
use crate::nn::Classifier;
use crate::tensor::{ParamStore, Tensor};

/// Per-target-class and mean attack success rates against one victim.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub victim: String,
    pub white_box: bool,
    /// target class -> success rate over samples with that target
    pub per_class: BTreeMap<usize, f32>,
    /// arithmetic mean over the target classes present
    pub mean_asr: f32,
    pub samples: usize,
}

/// Classify the clipped outputs and score argmax == target. Also records the
/// predictions into the samples under `victim_name`.
pub fn compute_asr(
    clf: &Classifier,
    store: &ParamStore,
    samples: &mut [AdvSample],
    victim_name: &str,
    white_box: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty sample list".into()));
    }
    let rows: Vec<Tensor> = samples.iter().map(|s| s.clipped.clone()).collect();
    let batch = Tensor::stack_rows(&rows)?;
    let preds = clf.predict(store, &batch)?;
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, &p) in samples.iter_mut().zip(&preds) {
        s.predictions.insert(victim_name.to_string(), p);
        let e = hits.entry(s.target).or_insert((0, 0));
        e.1 += 1;
        if p == s.target {
            e.0 += 1;
        }
    }
    let per_class: BTreeMap<usize, f32> =
        hits.iter().map(|(&c, &(h, n))| (c, h as f32 / n as f32)).collect();
    let mean_asr = per_class.values().sum::<f32>() / per_class.len() as f32;
    Ok(EvalReport {
        victim: victim_name.to_string(),
        white_box,
        per_class,
        mean_asr,
        samples: samples.len(),
    })
}

/// One victim of a transfer evaluation.
pub struct Victim<'a> {
    pub name: String,
    pub classifier: &'a Classifier,
    pub store: &'a ParamStore,
    /// the attack was trained against this model
    pub is_source: bool,
}

/// Transfer table: one ASR per victim plus a black-box average that excludes
/// the white-box (source) entries.
#[derive(Debug, Clone)]
pub struct TransferTable {
    pub entries: Vec<EvalReport>,
    /// None when every victim is the source
    pub black_box_average: Option<f32>,
}

impl TransferTable {
    /// Render as aligned text, starring the white-box entries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>8}\n", "victim", "asr"));
        for e in &self.entries {
            let star = if e.white_box { "*" } else { " " };
            out.push_str(&format!("{:<24} {:>7.4}{star}\n", e.victim, e.mean_asr));
        }
        match self.black_box_average {
            Some(avg) => out.push_str(&format!("{:<24} {:>8.4}\n", "black-box average", avg)),
            None => out.push_str(&format!("{:<24} {:>8}\n", "black-box average", "n/a")),
        }
        out
    }
}

/// Evaluate the same samples against every victim. The source model must be
/// present and marked.
pub fn transfer_matrix(victims: &[Victim<'_>], samples: &mut [AdvSample]) -> Result<TransferTable> {
    if victims.is_empty() {
        return Err(CoreError::InvalidArgument("no victims".into()));
    }
    if !victims.iter().any(|v| v.is_source) {
        return Err(CoreError::InvalidArgument("source model not among victims".into()));
    }
    let mut entries = Vec::with_capacity(victims.len());
    for v in victims {
        entries.push(compute_asr(v.classifier, v.store, samples, &v.name, v.is_source)?);
    }
    let black: Vec<f32> =
        entries.iter().filter(|e| !e.white_box).map(|e| e.mean_asr).collect();
    let black_box_average = if black.is_empty() {
        None
    } else {
        Some(black.iter().sum::<f32>() / black.len() as f32)
    };
    Ok(TransferTable { entries, black_box_average })
}

/// Affinely rescale each perturbation to [0, 1] (constant maps to 0.5-gray)
/// and classify it alone; success rate of argmax == target.
pub fn perturbation_asr(
    clf: &Classifier,
    store: &ParamStore,
    samples: &[AdvSample],
) -> Result<f32> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty sample list".into()));
    }
    let rows: Vec<Tensor> = samples
        .iter()
        .map(|s| scale_perturbation_unit(&s.perturbation()))
        .collect::<Result<_>>()?;
    let batch = Tensor::stack_rows(&rows)?;
    let preds = clf.predict(store, &batch)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.target).count();
    Ok(hits as f32 / samples.len() as f32)
}

/// ASR after pushing each clipped sample through an input-processing defense.
pub fn defended_asr(
    clf: &Classifier,
    store: &ParamStore,
    samples: &[AdvSample],
    side: usize,
    spec: &DefenseSpec,
) -> Result<f32> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty sample list".into()));
    }
    let rows: Vec<Tensor> = samples
        .iter()
        .map(|s| apply_defense(&s.clipped, side, spec))
        .collect::<Result<_>>()?;
    let batch = Tensor::stack_rows(&rows)?;
    let preds = clf.predict(store, &batch)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.target).count();
    Ok(hits as f32 / samples.len() as f32)
}

/// ASR per disjoint contiguous split (for confidence intervals).
pub fn split_asrs(
    clf: &Classifier,
    store: &ParamStore,
    samples: &[AdvSample],
    splits: usize,
) -> Result<Vec<f32>> {
    if splits < 2 || samples.len() < splits {
        return Err(CoreError::InvalidArgument(format!(
            "need >= 2 splits and enough samples ({} samples, {splits} splits)",
            samples.len()
        )));
    }
    let per = samples.len() / splits;
    let mut out = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * per;
        let hi = if s + 1 == splits { samples.len() } else { lo + per };
        let chunk = &samples[lo..hi];
        let rows: Vec<Tensor> = chunk.iter().map(|x| x.clipped.clone()).collect();
        let preds = clf.predict(store, &Tensor::stack_rows(&rows)?)?;
        let hits = preds.iter().zip(chunk).filter(|(p, x)| **p == x.target).count();
        out.push(hits as f32 / chunk.len() as f32);
    }
    Ok(out)
}

/// min -> 0, max -> 1; a constant perturbation maps to all 0.5.
pub fn scale_perturbation_unit(delta: &Tensor) -> Result<Tensor> {
    let lo = delta.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = delta.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let data: Vec<f32> = if hi > lo {
        delta.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; delta.numel()]
    };
    Tensor::new(delta.shape().to_vec(), data)
}
