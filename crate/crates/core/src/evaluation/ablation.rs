//! Comparison of component-VAE runs trained on different provided masks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::line_chart;
use crate::data::save_png;
use crate::error::{MonetError, Result};
use crate::training::{MaskMode, MetricRow, TrainConfig};

/// One finished run: its configuration and metric log.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub config: TrainConfig,
    pub metrics: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: MaskMode,
    pub nll_mean: f64,
    pub latent_kl_mean: f64,
    /// Number of logged steps in the final window.
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub conditions: Vec<ConditionSummary>,
}

const CONDITIONS: [MaskMode; 3] = [MaskMode::AllInOne, MaskMode::ElementMasks, MaskMode::WrongElementMasks];

/// Last 10% of the logged rows, at least one.
pub fn final_window(rows: &[MetricRow]) -> &[MetricRow] {
    let n = rows.len().div_ceil(10).max(1).min(rows.len());
    &rows[rows.len() - n..]
}

fn config_differences(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>> {
    let (va, vb) = (serde_json::to_value(a)?, serde_json::to_value(b)?);
    let (oa, ob) = (va.as_object().expect("object"), vb.as_object().expect("object"));
    Ok(oa
        .iter()
        .filter(|(k, _)| k.as_str() != "mask_mode")
        .filter(|(k, v)| ob.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("{k}: {v} vs {}", ob.get(k.as_str()).cloned().unwrap_or_default()))
        .collect())
}

impl AblationReport {
    /// Requires exactly one run per provided-mask condition, with configs
    /// identical apart from the mask mode.
    pub fn from_runs(runs: &[AblationRun]) -> Result<Self> {
        let mut conditions = Vec::new();
        for mode in CONDITIONS {
            let matching: Vec<&AblationRun> = runs.iter().filter(|r| r.config.mask_mode == mode).collect();
            if matching.len() != 1 {
                return Err(MonetError::Comparison(format!("need exactly one {mode} run, got {}", matching.len())));
            }
        }
        if let Some(r) = runs.iter().find(|r| !CONDITIONS.contains(&r.config.mask_mode)) {
            return Err(MonetError::Comparison(format!("unexpected {} run in an ablation", r.config.mask_mode)));
        }
        let reference = &runs[0].config;
        for r in &runs[1..] {
            let diffs = config_differences(reference, &r.config)?;
            if !diffs.is_empty() {
                return Err(MonetError::Comparison(format!(
                    "{} and {} runs differ beyond the mask mode: {}",
                    reference.mask_mode,
                    r.config.mask_mode,
                    diffs.join(", ")
                )));
            }
        }
        for mode in CONDITIONS {
            let run = runs.iter().find(|r| r.config.mask_mode == mode).expect("checked");
            if run.metrics.is_empty() {
                return Err(MonetError::Comparison(format!("{mode} run has an empty metric log")));
            }
            let w = final_window(&run.metrics);
            let n = w.len() as f64;
            conditions.push(ConditionSummary {
                condition: mode,
                nll_mean: w.iter().map(|r| r.nll).sum::<f64>() / n,
                latent_kl_mean: w.iter().map(|r| r.latent_kl).sum::<f64>() / n,
                window: w.len(),
            });
        }
        Ok(Self { conditions })
    }

    pub fn get(&self, mode: MaskMode) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.condition == mode)
    }

    fn means(&self) -> (f64, f64, f64) {
        let nll = |m| self.get(m).map_or(f64::NAN, |c| c.nll_mean);
        (nll(MaskMode::ElementMasks), nll(MaskMode::AllInOne), nll(MaskMode::WrongElementMasks))
    }

    /// `nll(element) < nll(all_in_one)` and the wrong-mask run has the largest NLL.
    pub fn nll_ordering_holds(&self) -> bool {
        let (element, all, wrong) = self.means();
        element < all && wrong > all && wrong > element
    }

    /// Asserts the NLL ordering and, when `with_kl`, that the wrong-mask
    /// latent KL exceeds the element-mask one.
    pub fn check_ordering(&self, with_kl: bool) -> Result<()> {
        let (element, all, wrong) = self.means();
        if !self.nll_ordering_holds() {
            return Err(MonetError::Comparison(format!(
                "expected nll(element_masks) < nll(all_in_one) < nll(wrong_element_masks), got {element} / {all} / {wrong}"
            )));
        }
        if with_kl {
            let kl = |m| self.get(m).map_or(f64::NAN, |c| c.latent_kl_mean);
            let (ke, kw) = (kl(MaskMode::ElementMasks), kl(MaskMode::WrongElementMasks));
            if !(kw > ke) {
                return Err(MonetError::Comparison(format!(
                    "expected latent_kl(wrong_element_masks) > latent_kl(element_masks), got {kw} vs {ke}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,nll_mean,latent_kl_mean\n");
        for c in &self.conditions {
            let _ = writeln!(s, "{},{},{}", c.condition, c.nll_mean, c.latent_kl_mean);
        }
        s
    }

    /// Writes `ablation.csv`, `nll.png` and `latent_kl.png` into `dir`.
    pub fn write(&self, runs: &[AblationRun], dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MonetError::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| MonetError::io(&csv, e))?;
        let colors = |m: MaskMode| match m {
            MaskMode::ElementMasks => [0, 130, 200],
            MaskMode::WrongElementMasks => [230, 25, 75],
            _ => [60, 60, 60],
        };
        for (name, pick) in
            [("nll.png", (|r: &MetricRow| r.nll) as fn(&MetricRow) -> f64), ("latent_kl.png", |r| r.latent_kl)]
        {
            let curves: Vec<(Vec<(f64, f64)>, [u8; 3])> = runs
                .iter()
                .map(|r| (r.metrics.iter().map(|m| (m.step as f64, pick(m))).collect(), colors(r.config.mask_mode)))
                .collect();
            let refs: Vec<(&[(f64, f64)], [u8; 3])> = curves.iter().map(|(c, col)| (c.as_slice(), *col)).collect();
            save_png(dir.join(name), &line_chart(&refs, 640, 360))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: MaskMode, nll: f64, kl: f64) -> AblationRun {
        let metrics = (0..20)
            .map(|s| MetricRow {
                step: s,
                nll: if s < 18 { 1e6 } else { nll },
                latent_kl: kl,
                mask_kl: 0.0,
                total: 0.0,
            })
            .collect();
        AblationRun { config: TrainConfig::for_mode(mode), metrics }
    }

    #[test]
    fn final_window_is_last_tenth() {
        let rows = run(MaskMode::AllInOne, 1.0, 0.0).metrics;
        assert_eq!(final_window(&rows).len(), 2);
        assert_eq!(final_window(&rows[..3]).len(), 1);
    }

    #[test]
    fn ordering_and_csv() {
        let runs = [
            run(MaskMode::AllInOne, -100.0, 5.0),
            run(MaskMode::ElementMasks, -200.0, 4.0),
            run(MaskMode::WrongElementMasks, -50.0, 9.0),
        ];
        let r = AblationReport::from_runs(&runs).unwrap();
        r.check_ordering(true).unwrap();
        assert!(r.to_csv().starts_with("condition,nll_mean,latent_kl_mean\nall_in_one,-100,5\n"));
        let dir = tempfile::tempdir().unwrap();
        r.write(&runs, dir.path()).unwrap();
        assert!(dir.path().join("nll.png").exists());
    }

    #[test]
    fn identical_logs_fail_ordering() {
        let runs = [
            run(MaskMode::AllInOne, -100.0, 5.0),
            run(MaskMode::ElementMasks, -100.0, 5.0),
            run(MaskMode::WrongElementMasks, -100.0, 5.0),
        ];
        let err = AblationReport::from_runs(&runs).unwrap().check_ordering(false).unwrap_err();
        assert!(err.to_string().contains("nll(element_masks) < nll(all_in_one)"), "{err}");
    }

    #[test]
    fn mismatched_configs_are_refused() {
        let mut runs = vec![
            run(MaskMode::AllInOne, -100.0, 5.0),
            run(MaskMode::ElementMasks, -200.0, 4.0),
            run(MaskMode::WrongElementMasks, -50.0, 9.0),
        ];
        runs[2].config.batch_size = 3;
        let err = AblationReport::from_runs(&runs).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        runs.pop();
        assert!(AblationReport::from_runs(&runs).is_err());
    }
}
