//! Random search over per-layer deviation bit widths.
//!
//! Candidates are scored by mean next-token NLL on calibration sequences
//! decoded through the compressed cache. Uniform plans can be injected as
//! anchors so the result is never worse than the best uniform plan in the
//! pool.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::BlockSpec;
use crate::config::PrecisionPlan;
use crate::error::{Error, Result};
use crate::memory::memory_ratio;
use crate::model::{ReferenceDecoder, ToyModel};
use crate::quant::BitWidth;
use crate::synthetic::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub num_candidates: usize,
    pub bit_choices: Vec<BitWidth>,
    pub memory_budget: Option<f64>,
    pub seed: u64,
    pub include_uniform_anchors: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_candidates: 64,
            bit_choices: BitWidth::QUANTIZED.to_vec(),
            memory_budget: None,
            seed: 0,
            include_uniform_anchors: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::Config("num_candidates must be at least 1".into()));
        }
        if self.bit_choices.is_empty() {
            return Err(Error::Config("bit_choices must not be empty".into()));
        }
        if self.bit_choices.iter().any(|b| b.is_passthrough()) {
            return Err(Error::Config("bit_choices are limited to 2, 4 and 8".into()));
        }
        if let Some(b) = self.memory_budget {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!("memory budget {b} must be positive")));
            }
        }
        Ok(())
    }

    /// Bit choices without duplicates, ascending.
    fn choices(&self) -> Vec<BitWidth> {
        let mut c = self.bit_choices.clone();
        c.sort();
        c.dedup();
        c
    }
}

/// Token-id sequences scored by next-token prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibrationSet {
    sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("calibration set is empty".into()));
        }
        if let Some(i) = sequences.iter().position(|s| s.len() < 2) {
            return Err(Error::Data(format!("calibration sequence {i} has fewer than 2 tokens")));
        }
        Ok(Self { sequences })
    }

    /// `count` uniform random sequences of `len` ids below `vocab_size`.
    pub fn synthetic(seed: u64, count: usize, len: usize, vocab_size: usize) -> Result<Self> {
        let mut r = rng(seed);
        Self::new(
            (0..count)
                .map(|_| (0..len).map(|_| r.random_range(0..vocab_size as u32)).collect())
                .collect(),
        )
    }

    /// `count` sequences of `len` tokens sampled from the model's own
    /// uncompressed next-token distribution, each started from a uniform
    /// random token. Cross-entropy on such data is minimized by the exact
    /// model, so any precision loss shows up as a higher score.
    pub fn sampled(model: &ToyModel, seed: u64, count: usize, len: usize) -> Result<Self> {
        let mut r = rng(seed);
        let vocab = model.config().vocab_size;
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            let mut dec = ReferenceDecoder::new(model);
            let mut seq = vec![r.random_range(0..vocab as u32)];
            while seq.len() < len {
                let logits = dec.step(*seq.last().unwrap())?;
                seq.push(sample_softmax(&mut r, &logits));
            }
            sequences.push(seq);
        }
        Self::new(sequences)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sequences: Vec<Vec<u32>> = serde_json::from_str(text)?;
        Self::new(sequences)
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn predicted_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }
}

fn sample_softmax(r: &mut impl Rng, logits: &[f32]) -> u32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let mut u = r.random::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (logits.len() - 1) as u32
}

/// Mean next-token NLL over every predicted position of `calib`, decoding
/// through caches built with `plan` and the model's residual length.
pub fn score_plan(model: &ToyModel, plan: &PrecisionPlan, calib: &CalibrationSet) -> Result<f64> {
    let cfg = model.cache_config();
    if plan.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "plan has {} entries for {} layers",
            plan.len(),
            cfg.num_layers
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for seq in calib.sequences() {
        let (s, n) = model.sequence_nll_sum(seq, plan, cfg.residual_length, BlockSpec::default())?;
        sum += s;
        count += n;
    }
    Ok(sum / count as f64)
}

/// Mean next-token NLL of `calib` under uncompressed attention.
pub fn uncompressed_score(model: &ToyModel, calib: &CalibrationSet) -> Result<f64> {
    let mut sum = 0.0;
    for seq in calib.sequences() {
        sum += model.uncompressed_nll(seq)? * (seq.len() - 1) as f64;
    }
    Ok(sum / calib.predicted_tokens() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_index: usize,
    pub plan: PrecisionPlan,
    pub score: f64,
    pub memory_ratio: f64,
    pub feasible: bool,
    pub anchor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub num_layers: usize,
    pub seed: u64,
    pub memory_budget: Option<f64>,
    pub best_index: usize,
    pub candidates: Vec<CandidateRecord>,
}

impl CalibrationReport {
    pub fn best(&self) -> &CandidateRecord {
        &self.candidates[self.best_index]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `candidate_index,score,memory_ratio,bits_layer_0,...`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate_index,score,memory_ratio");
        for l in 0..self.num_layers {
            write!(out, ",bits_layer_{l}").unwrap();
        }
        out.push('\n');
        for c in &self.candidates {
            write!(out, "{},{},{}", c.candidate_index, c.score, c.memory_ratio).unwrap();
            for b in c.plan.bits() {
                write!(out, ",{}", b.bits()).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV form back into `(candidate_index, score, memory_ratio, plan)` rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(usize, f64, f64, PrecisionPlan)>> {
        let bad = |line: usize, what: &str| Error::Format(format!("report csv line {line}: {what}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let layers = cols.len().saturating_sub(3);
        let expected = ["candidate_index", "score", "memory_ratio"];
        if cols.len() < 3
            || cols[..3] != expected
            || cols[3..].iter().enumerate().any(|(i, c)| *c != format!("bits_layer_{i}"))
        {
            return Err(bad(1, "unexpected header"));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 + layers {
                    return Err(bad(i + 2, "wrong field count"));
                }
                let idx = f[0].parse().map_err(|_| bad(i + 2, "candidate_index"))?;
                let score = f[1].parse().map_err(|_| bad(i + 2, "score"))?;
                let ratio = f[2].parse().map_err(|_| bad(i + 2, "memory_ratio"))?;
                let bits = f[3..]
                    .iter()
                    .map(|s| {
                        s.parse::<u8>()
                            .ok()
                            .and_then(|b| BitWidth::try_from(b).ok())
                            .ok_or_else(|| bad(i + 2, "bit width"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((idx, score, ratio, PrecisionPlan::new(bits)))
            })
            .collect()
    }
}

/// The candidate pool in generation order: uniform anchors over the bit
/// choices (when enabled), then `num_candidates` plans drawn uniformly per
/// layer.
pub fn candidate_pool(search: &SearchConfig, num_layers: usize) -> Result<Vec<(PrecisionPlan, bool)>> {
    search.validate()?;
    let choices = search.choices();
    let mut pool = Vec::with_capacity(search.num_candidates + choices.len());
    if search.include_uniform_anchors {
        pool.extend(choices.iter().map(|&b| (PrecisionPlan::uniform(num_layers, b), true)));
    }
    let mut r = rng(search.seed);
    for _ in 0..search.num_candidates {
        let bits = (0..num_layers)
            .map(|_| choices[r.random_range(0..choices.len())])
            .collect();
        pool.push((PrecisionPlan::new(bits), false));
    }
    Ok(pool)
}

/// Scores every candidate and returns the feasible one with the lowest
/// score; ties go to the lower memory ratio, then the earlier candidate.
pub fn random_search(
    search: &SearchConfig,
    calib: &CalibrationSet,
    model: &ToyModel,
) -> Result<(PrecisionPlan, CalibrationReport)> {
    let cfg = model.cache_config();
    let pool = candidate_pool(search, cfg.num_layers)?;
    let scores: Vec<f64> = pool
        .par_iter()
        .map(|(plan, _)| score_plan(model, plan, calib))
        .collect::<Result<_>>()?;
    let candidates: Vec<CandidateRecord> = pool
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, ((plan, anchor), score))| {
            let ratio = memory_ratio(&cfg.clone().with_plan(plan.clone()), 1, false);
            CandidateRecord {
                candidate_index: i,
                feasible: search.memory_budget.is_none_or(|b| ratio <= b),
                plan,
                score,
                memory_ratio: ratio,
                anchor,
            }
        })
        .collect();
    let best = candidates
        .iter()
        .filter(|c| c.feasible)
        .min_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(a.memory_ratio.total_cmp(&b.memory_ratio))
                .then(a.candidate_index.cmp(&b.candidate_index))
        });
    let Some(best) = best else {
        let tightest = candidates
            .iter()
            .min_by(|a, b| a.memory_ratio.total_cmp(&b.memory_ratio))
            .expect("pool is non-empty");
        return Err(Error::BudgetInfeasible {
            budget: search.memory_budget.unwrap_or(f64::INFINITY),
            tightest_index: tightest.candidate_index,
            tightest_ratio: tightest.memory_ratio,
        });
    };
    let report = CalibrationReport {
        num_layers: cfg.num_layers,
        seed: search.seed,
        memory_budget: search.memory_budget,
        best_index: best.candidate_index,
        candidates,
    };
    Ok((report.best().plan.clone(), report))
}

/// Layer counts per bit width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitHistogram {
    pub four: usize,
    pub two: usize,
    pub eight: usize,
    pub sixteen: usize,
}

impl BitHistogram {
    pub fn of(bits: &[BitWidth]) -> Self {
        let mut h = Self::default();
        for b in bits {
            match b {
                BitWidth::Two => h.two += 1,
                BitWidth::Four => h.four += 1,
                BitWidth::Eight => h.eight += 1,
                BitWidth::Sixteen => h.sixteen += 1,
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.four + self.two + self.eight + self.sixteen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub candidate_index: usize,
    pub score: f64,
    pub all: BitHistogram,
    /// Layers `0..L/2`.
    pub lower: BitHistogram,
    /// Layers `L/2..L`.
    pub upper: BitHistogram,
}

/// Per-candidate bit-width histograms, best score first.
pub fn sensitivity_report(report: &CalibrationReport) -> Vec<SensitivityRow> {
    let mut rows: Vec<SensitivityRow> = report
        .candidates
        .iter()
        .map(|c| {
            let bits = c.plan.bits();
            let half = bits.len() / 2;
            SensitivityRow {
                candidate_index: c.candidate_index,
                score: c.score,
                all: BitHistogram::of(bits),
                lower: BitHistogram::of(&bits[..half]),
                upper: BitHistogram::of(&bits[half..]),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.candidate_index.cmp(&b.candidate_index)));
    rows
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut out = String::from(
        "candidate_index,score,bits4,bits2,bits8,lower_bits4,lower_bits2,lower_bits8,upper_bits4,upper_bits2,upper_bits8\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.candidate_index,
            r.score,
            r.all.four,
            r.all.two,
            r.all.eight,
            r.lower.four,
            r.lower.two,
            r.lower.eight,
            r.upper.four,
            r.upper.two,
            r.upper.eight
        )
        .unwrap();
    }
    out
}
