//! Multi-seed experiment runners: baseline comparison, ablations and the
//! λ sweep. Runs are cached by their full configuration text, so a variant
//! shared between two reports is trained once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{evaluate, mean, sign_test, std_dev, Metrics};
use super::trainer::train;
use crate::augmentation::CounterfactualRecord;
use crate::error::{CedError, Result};
use crate::kv::KvConfig;
use crate::synth_data::DatasetBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutSentiRev,
    WithoutSentiInv,
    WithoutCounterfactual,
    WithoutAdaptContra,
    /// No counterfactual data and no contrastive term.
    Baseline,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::WithoutSentiRev,
        Variant::WithoutSentiInv,
        Variant::WithoutCounterfactual,
        Variant::WithoutAdaptContra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutSentiRev => "without_senti_rev",
            Variant::WithoutSentiInv => "without_senti_inv",
            Variant::WithoutCounterfactual => "without_counterfactual",
            Variant::WithoutAdaptContra => "without_adapt_contra",
            Variant::Baseline => "baseline",
        }
    }

    /// `base` with this variant's switches. λ and everything else is kept,
    /// except for the baseline, which trains with λ = 0.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.use_senti_rev = true;
        c.use_senti_inv = true;
        c.use_contrastive = true;
        c.use_adaptive_weights = true;
        match self {
            Variant::Full => {}
            Variant::WithoutSentiRev => c.use_senti_rev = false,
            Variant::WithoutSentiInv => c.use_senti_inv = false,
            Variant::WithoutCounterfactual => {
                c.use_senti_rev = false;
                c.use_senti_inv = false;
            }
            Variant::WithoutAdaptContra => c.use_contrastive = false,
            Variant::Baseline => {
                c.use_senti_rev = false;
                c.use_senti_inv = false;
                c.use_contrastive = false;
                c.lambda = 0.0;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of one training run, evaluated on every held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub lambda: f64,
    pub best_epoch: usize,
    pub validation: Metrics,
    pub test_biased: Metrics,
    pub test_anti_biased: Metrics,
    pub diverged_at: Option<usize>,
}

/// Configuration with switches that cannot affect the trained parameters
/// normalized away: without a contrastive gradient (`use_contrastive` off
/// or λ = 0) the contrastive settings are irrelevant. Runs are cached under
/// this form, so the λ = 0 sweep point and the ablation without the
/// contrastive module share one training run.
fn effective(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    if !c.use_contrastive || c.lambda == 0.0 {
        let d = TrainConfig::default();
        c.use_contrastive = false;
        c.lambda = 0.0;
        c.use_adaptive_weights = d.use_adaptive_weights;
        c.denominator_includes_positive = d.denominator_includes_positive;
        c.temperature = d.temperature;
    }
    c
}

pub struct Experiment<'a> {
    pub bundle: &'a DatasetBundle,
    pub records: &'a [CounterfactualRecord],
    /// Number of runs trained concurrently.
    pub jobs: usize,
    cache: BTreeMap<String, RunSummary>,
}

impl<'a> Experiment<'a> {
    pub fn new(bundle: &'a DatasetBundle, records: &'a [CounterfactualRecord]) -> Self {
        Experiment {
            bundle,
            records,
            jobs: 1,
            cache: BTreeMap::new(),
        }
    }

    pub fn runs_cached(&self) -> usize {
        self.cache.len()
    }

    fn run_uncached(&self, cfg: &TrainConfig) -> Result<RunSummary> {
        let result = train(cfg, self.bundle, self.records)?;
        let summary = RunSummary {
            seed: cfg.seed,
            lambda: cfg.lambda,
            best_epoch: result.best_epoch,
            validation: evaluate(&result.model, &self.bundle.validation)?,
            test_biased: evaluate(&result.model, &self.bundle.test_biased)?,
            test_anti_biased: evaluate(&result.model, &self.bundle.test_anti_biased)?,
            diverged_at: result.diverged_at,
        };
        info!(
            "seed {} lambda {}: anti-biased accuracy {:.4}",
            cfg.seed, cfg.lambda, summary.test_anti_biased.accuracy
        );
        Ok(summary)
    }

    /// Trains every configuration not already cached, `jobs` at a time,
    /// and returns summaries in input order.
    pub fn run_all(&mut self, cfgs: &[TrainConfig]) -> Result<Vec<RunSummary>> {
        let keys: Vec<String> = cfgs.iter().map(|c| effective(c).to_kv_string()).collect();
        let mut pending: Vec<(String, TrainConfig)> = Vec::new();
        for (k, c) in keys.iter().zip(cfgs) {
            if !self.cache.contains_key(k) && !pending.iter().any(|(p, _)| p == k) {
                pending.push((k.clone(), effective(c)));
            }
        }
        for chunk in pending.chunks(self.jobs.max(1)) {
            let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(_, c)| scope.spawn(|| self.run_uncached(c)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training thread panicked"))
                    .collect()
            });
            for ((k, _), r) in chunk.iter().zip(results) {
                self.cache.insert(k.clone(), r?);
            }
        }
        Ok(keys.iter().map(|k| self.cache[k].clone()).collect())
    }

    pub fn run(&mut self, cfg: &TrainConfig) -> Result<RunSummary> {
        Ok(self.run_all(std::slice::from_ref(cfg))?.remove(0))
    }

    /// Every variant in `variants` at every seed, in variant-major order.
    pub fn run_variants(
        &mut self,
        base: &TrainConfig,
        variants: &[Variant],
        seeds: &[u64],
    ) -> Result<Vec<(Variant, RunSummary)>> {
        let mut cfgs = Vec::new();
        let mut tags = Vec::new();
        for &v in variants {
            for &seed in seeds {
                let mut c = v.apply(base);
                c.seed = seed;
                cfgs.push(c);
                tags.push(v);
            }
        }
        Ok(tags.into_iter().zip(self.run_all(&cfgs)?).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        MeanSd {
            mean: mean(values),
            sd: std_dev(values),
        }
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub biased_acc: MeanSd,
    pub biased_f1: MeanSd,
    pub anti_acc: MeanSd,
    pub anti_f1: MeanSd,
    /// Mean anti-biased accuracy minus the reference variant's.
    pub delta_anti_acc: f64,
    /// Seeds where the reference beat this variant, and the reverse.
    pub ref_wins: usize,
    pub ref_losses: usize,
    /// One-sided sign-test p-values: the reference better than this
    /// variant, and this variant better than the reference.
    pub p_ref_better: f64,
    pub p_variant_better: f64,
}

/// Paired comparison on anti-biased accuracy against `reference`, which
/// must have one run per seed in the same order.
fn summarize(variant: Variant, runs: &[&RunSummary], reference: &[&RunSummary]) -> Result<VariantSummary> {
    let pick = |rs: &[&RunSummary], f: fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
    let anti = pick(runs, |r| r.test_anti_biased.accuracy);
    let ref_anti = pick(reference, |r| r.test_anti_biased.accuracy);
    let (ref_wins, ref_losses, p_ref_better) = sign_test(&ref_anti, &anti)?;
    let (_, _, p_variant_better) = sign_test(&anti, &ref_anti)?;
    Ok(VariantSummary {
        variant,
        biased_acc: MeanSd::of(&pick(runs, |r| r.test_biased.accuracy)),
        biased_f1: MeanSd::of(&pick(runs, |r| r.test_biased.macro_f1)),
        anti_acc: MeanSd::of(&anti),
        anti_f1: MeanSd::of(&pick(runs, |r| r.test_anti_biased.macro_f1)),
        delta_anti_acc: mean(&anti) - mean(&ref_anti),
        ref_wins,
        ref_losses,
        p_ref_better,
        p_variant_better,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<(Variant, RunSummary)>,
    /// Reference variant first.
    pub summaries: Vec<VariantSummary>,
}

impl ExperimentReport {
    fn build(seeds: &[u64], runs: Vec<(Variant, RunSummary)>, order: &[Variant]) -> Result<Self> {
        let of = |v: Variant| runs.iter().filter(|(w, _)| *w == v).map(|(_, r)| r).collect::<Vec<_>>();
        let reference = of(order[0]);
        let summaries = order
            .iter()
            .map(|&v| summarize(v, &of(v), &reference))
            .collect::<Result<_>>()?;
        Ok(ExperimentReport {
            seeds: seeds.to_vec(),
            runs,
            summaries,
        })
    }

    pub fn summary(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }

    /// One row per (variant, seed).
    pub fn runs_csv(&self) -> String {
        let mut out = String::from(
            "variant,seed,lambda,best_epoch,val_acc,biased_acc,biased_f1,anti_acc,anti_f1\n",
        );
        for (v, r) in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                v,
                r.seed,
                r.lambda,
                r.best_epoch,
                r.validation.accuracy,
                r.test_biased.accuracy,
                r.test_biased.macro_f1,
                r.test_anti_biased.accuracy,
                r.test_anti_biased.macro_f1
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "variant,biased_acc_mean,biased_acc_sd,biased_f1_mean,biased_f1_sd,anti_acc_mean,anti_acc_sd,anti_f1_mean,anti_f1_sd,delta_anti_acc,ref_wins,ref_losses,p_ref_better,p_variant_better\n",
        );
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.6}\n",
                s.variant,
                s.biased_acc.mean,
                s.biased_acc.sd,
                s.biased_f1.mean,
                s.biased_f1.sd,
                s.anti_acc.mean,
                s.anti_acc.sd,
                s.anti_f1.mean,
                s.anti_f1.sd,
                s.delta_anti_acc,
                s.ref_wins,
                s.ref_losses,
                s.p_ref_better,
                s.p_variant_better
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seeds: {:?}\n", self.seeds);
        for s in &self.summaries {
            out.push_str(&format!(
                "{:<24} biased acc {}  f1 {}  anti-biased acc {}  f1 {}  delta {:+.4}  reference wins/losses {}/{} p(reference better)={:.4} p(variant better)={:.4}\n",
                s.variant.as_str(),
                s.biased_acc,
                s.biased_f1,
                s.anti_acc,
                s.anti_f1,
                s.delta_anti_acc,
                s.ref_wins,
                s.ref_losses,
                s.p_ref_better,
                s.p_variant_better
            ));
        }
        out
    }
}

fn require_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(CedError::config("seeds", format!("need at least {min} seeds")));
    }
    if (1..seeds.len()).any(|i| seeds[..i].contains(&seeds[i])) {
        return Err(CedError::config("seeds", "seeds must be distinct"));
    }
    Ok(())
}

/// Full model plus the four ablations at each seed; deltas and sign tests
/// are taken against the full model.
pub fn run_ablation(exp: &mut Experiment, base: &TrainConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    require_seeds(seeds, 3)?;
    let mut order = vec![Variant::Full];
    order.extend(Variant::ABLATIONS);
    let runs = exp.run_variants(base, &order, seeds)?;
    ExperimentReport::build(seeds, runs, &order)
}

/// Full model against the baseline at each seed; deltas and sign tests are
/// taken against the baseline.
pub fn compare_baseline(exp: &mut Experiment, base: &TrainConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    require_seeds(seeds, 1)?;
    let order = [Variant::Baseline, Variant::Full];
    let runs = exp.run_variants(base, &order, seeds)?;
    ExperimentReport::build(seeds, runs, &order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub anti_acc: MeanSd,
    pub anti_f1: MeanSd,
    pub per_seed_anti_acc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,anti_acc_mean,anti_acc_sd,anti_f1_mean,anti_f1_sd\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                p.lambda, p.anti_acc.mean, p.anti_acc.sd, p.anti_f1.mean, p.anti_f1.sd
            ));
        }
        out
    }

    pub fn point(&self, lambda: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| (p.lambda - lambda).abs() < 1e-9)
    }
}

/// The full model retrained at each λ in `values`, one row per value.
pub fn sweep_lambda(exp: &mut Experiment, base: &TrainConfig, values: &[f64], seeds: &[u64]) -> Result<SweepCurve> {
    if values.is_empty() {
        return Err(CedError::config("grid", "no λ values"));
    }
    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(CedError::config("grid", format!("λ = {bad} is not finite and non-negative")));
    }
    require_seeds(seeds, 1)?;
    let mut cfgs = Vec::new();
    for &lambda in values {
        for &seed in seeds {
            let mut c = Variant::Full.apply(base);
            c.lambda = lambda;
            c.seed = seed;
            cfgs.push(c);
        }
    }
    let runs = exp.run_all(&cfgs)?;
    let points = values
        .iter()
        .zip(runs.chunks(seeds.len()))
        .map(|(&lambda, rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.test_anti_biased.accuracy).collect();
            let f1: Vec<f64> = rs.iter().map(|r| r.test_anti_biased.macro_f1).collect();
            SweepPoint {
                lambda,
                anti_acc: MeanSd::of(&acc),
                anti_f1: MeanSd::of(&f1),
                per_seed_anti_acc: acc,
            }
        })
        .collect();
    Ok(SweepCurve {
        seeds: seeds.to_vec(),
        points,
    })
}

/// λ values from `"start:end:step"` (inclusive of `end`) or a comma list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |m: String| CedError::config("grid", m);
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("`{s}` is not a number")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let values = match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step) = (num(start)?, num(end)?, num(step)?);
            if step <= 0.0 || end < start {
                return Err(bad("need start <= end and a positive step".into()));
            }
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            if n > 10_000 {
                return Err(bad("grid has more than 10000 points".into()));
            }
            (0..n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(bad(format!("`{text}` is neither start:end:step nor a list"))),
    };
    if values.iter().any(|v| *v < 0.0) {
        return Err(bad("λ must be non-negative".into()));
    }
    Ok(values)
}

/// `"N"` means seeds `1..=N`; `"a,b,c"` lists seeds explicitly.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || CedError::config("seeds", format!("`{text}` is neither a count nor a list"));
    let seeds = if text.contains(',') {
        text.split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    } else {
        let n = text.trim().parse::<u64>().map_err(|_| bad())?;
        (1..=n).collect()
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

impl FromStr for Variant {
    type Err = CedError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Variant::Full,
            Variant::WithoutSentiRev,
            Variant::WithoutSentiInv,
            Variant::WithoutCounterfactual,
            Variant::WithoutAdaptContra,
            Variant::Baseline,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| CedError::config("variant", format!("unknown variant `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1.2:0.1").unwrap();
        assert_eq!(g.len(), 13);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[12], 1.2);
        assert_eq!(parse_grid("0, 0.4,0.8").unwrap(), vec![0.0, 0.4, 0.8]);
        for bad in ["", "0:1", "1:0:0.1", "0:1:0", "a,b", "0:1:0.1:2", "-1,2"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn seed_parsing() {
        assert_eq!(parse_seeds("5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("7,9").unwrap(), vec![7, 9]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn variant_switches() {
        let base = TrainConfig::default();
        let c = Variant::WithoutCounterfactual.apply(&base);
        assert!(!c.use_senti_rev && !c.use_senti_inv && c.use_contrastive);
        let c = Variant::WithoutAdaptContra.apply(&base);
        assert!(c.use_senti_rev && c.use_senti_inv && !c.use_contrastive);
        let c = Variant::Baseline.apply(&base);
        assert_eq!(c.lambda, 0.0);
        assert!(!c.uses_counterfactuals() && !c.use_contrastive);
        assert_eq!("without_senti_inv".parse::<Variant>().unwrap(), Variant::WithoutSentiInv);
    }
}
