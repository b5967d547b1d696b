//! Trains the main configuration and its six single-change variants and
//! tabulates held-out precision.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::correlation::{Fusion, KernelMode, KernelShape, LevelMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::RegressionInput;
use crate::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Main,
    MaxFusion,
    ConcatFusion,
    Kernel3x3,
    SingleKernel,
    SingleLevel,
    LanguageGuidedRegression,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Main,
        Variant::MaxFusion,
        Variant::ConcatFusion,
        Variant::Kernel3x3,
        Variant::SingleKernel,
        Variant::SingleLevel,
        Variant::LanguageGuidedRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Main => "main (average fusion)",
            Variant::MaxFusion => "maximum fusion",
            Variant::ConcatFusion => "concatenation fusion",
            Variant::Kernel3x3 => "3x3 language filter",
            Variant::SingleKernel => "single language filter",
            Variant::SingleLevel => "single level visual feature",
            Variant::LanguageGuidedRegression => "language-guided regression",
        }
    }

    /// `base` with this variant's one change applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        match self {
            Variant::Main => {}
            Variant::MaxFusion => m.fusion = Fusion::Max,
            Variant::ConcatFusion => m.fusion = Fusion::Concat,
            Variant::Kernel3x3 => m.kernel_shape = KernelShape::ThreeByThree,
            Variant::SingleKernel => m.kernel_mode = KernelMode::Single,
            Variant::SingleLevel => m.levels = LevelMode::Single,
            Variant::LanguageGuidedRegression => m.regression_input = RegressionInput::LanguageGuided,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub split: String,
    pub count: usize,
    pub precision: f64,
    pub mean_iou: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn get(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// The two directional expectations: average fusion at least matches
    /// the single-level model, and visual-only regression at least matches
    /// language-guided regression. `None` when a row is missing.
    pub fn expectations(&self) -> Vec<(&'static str, Option<bool>)> {
        let cmp = |a: Variant, b: Variant| Some(self.get(a)?.precision >= self.get(b)?.precision);
        vec![
            (
                "average fusion >= single level visual feature",
                cmp(Variant::Main, Variant::SingleLevel),
            ),
            (
                "visual-only regression >= language-guided regression",
                cmp(Variant::Main, Variant::LanguageGuidedRegression),
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("variant\tseed\tsteps\tsplit\tcount\tprec@0.5\tmean_iou\tfinal_loss\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.5}\n",
                r.variant.name(),
                r.seed,
                r.steps,
                r.split,
                r.count,
                r.precision,
                r.mean_iou,
                r.final_loss
            ));
        }
        s.push('\n');
        for (what, held) in self.expectations() {
            let verdict = match held {
                Some(true) => "holds",
                Some(false) => "does not hold",
                None => "not measured",
            };
            s.push_str(&format!("# expectation: {what}: {verdict}\n"));
        }
        s
    }
}

/// Trains each variant of `base` on the `train` split and scores it on
/// `test` (or `val` when there is no test split).
pub fn run_ablation(
    base: &TrainConfig,
    data: &Dataset,
    variants: &[Variant],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let split = ["test", "val"]
        .into_iter()
        .find(|s| data.split(s).is_ok_and(|r| !r.is_empty()))
        .ok_or_else(|| Error::Invalid("ablation needs a non-empty test or val split".into()))?;
    let held_out = data.split(split)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (i, &v) in variants.iter().enumerate() {
        let cfg = v.apply(base);
        log::info!("ablation {}/{}: {}", i + 1, variants.len(), v.name());
        let run_dir = out_dir.map(|d| d.join(format!("variant-{i}")));
        let ckpt = train(&cfg, data, run_dir.as_deref())?;
        let report = evaluate(&ckpt.model, split, held_out)?;
        let final_loss = crate::train::parse_metrics(&ckpt.metrics)
            .last()
            .map_or(f64::NAN, |m| m.loss);
        rows.push(AblationRow {
            variant: v,
            seed: cfg.seed,
            steps: cfg.steps,
            split: split.to_string(),
            count: report.count,
            precision: report.precision,
            mean_iou: report.mean_iou,
            final_loss,
        });
    }
    let table = AblationTable { rows };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("ablation.tsv");
        fs::write(&p, table.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_variant_changes_one_field() {
        let base = TrainConfig::default();
        let mut seen = Vec::new();
        for v in Variant::ALL {
            let c = v.apply(&base);
            assert_eq!(c.steps, base.steps);
            let diffs = [
                c.model.fusion != base.model.fusion,
                c.model.kernel_shape != base.model.kernel_shape,
                c.model.kernel_mode != base.model.kernel_mode,
                c.model.levels != base.model.levels,
                c.model.regression_input != base.model.regression_input,
            ];
            let n = diffs.iter().filter(|&&d| d).count();
            assert_eq!(n, usize::from(v != Variant::Main), "{v:?}");
            seen.push(c.model);
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                assert_ne!(seen[i], seen[j]);
            }
        }
    }

    #[test]
    fn table_reports_expectations() {
        let row = |variant, precision| AblationRow {
            variant,
            seed: 1,
            steps: 10,
            split: "test".into(),
            count: 5,
            precision,
            mean_iou: 0.5,
            final_loss: 1.0,
        };
        let t = AblationTable {
            rows: vec![
                row(Variant::Main, 0.8),
                row(Variant::SingleLevel, 0.6),
                row(Variant::LanguageGuidedRegression, 0.9),
            ],
        };
        let e = t.expectations();
        assert_eq!(e[0].1, Some(true));
        assert_eq!(e[1].1, Some(false));
        let text = t.to_text();
        assert!(text.contains("single level visual feature\t1\t10\ttest\t5\t0.6000"));
        assert!(text.contains("does not hold"));
    }
}
