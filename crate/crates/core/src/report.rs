//! Evaluation summaries in the layout of the published tables: robustness
//! rows as `mean(std) median [min, max]` and Dice as `mean(std)`.

use serde::{Deserialize, Serialize};

use crate::tracking::{robustness_metrics, RobustnessMetrics, TrackResult, TrackStatus};
use crate::types::{pose_difference, RigidPose};

/// Descriptive statistics; `std` is the sample standard deviation (0 for a
/// single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Some(Summary { count: n, mean, std: var.sqrt(), median, min: sorted[0], max: sorted[n - 1] })
    }

    /// `mean(std)` with `decimals` places, e.g. `98.11(54.65)`.
    pub fn mean_std(&self, decimals: usize) -> String {
        format!("{:.*}({:.*})", decimals, self.mean, decimals, self.std)
    }

    /// `[min, max]`.
    pub fn range(&self) -> String {
        format!("[{}, {}]", plain(self.min), plain(self.max))
    }
}

/// Integers without a fraction, everything else to two places.
pub fn plain(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.2}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub sequences: Vec<RobustnessMetrics>,
    pub total_frames: Summary,
    pub num_losses: Summary,
    pub longest_run: Summary,
}

impl RobustnessReport {
    pub fn from_sequences(sequences: Vec<RobustnessMetrics>) -> Option<Self> {
        let col = |f: fn(&RobustnessMetrics) -> usize| Summary::of(&sequences.iter().map(|m| f(m) as f64).collect::<Vec<_>>());
        Some(Self {
            total_frames: col(|m| m.total_frames)?,
            num_losses: col(|m| m.num_losses)?,
            longest_run: col(|m| m.longest_run)?,
            sequences,
        })
    }

    pub fn rows(&self) -> [(&'static str, &Summary); 3] {
        [
            ("total frames", &self.total_frames),
            ("no. of tracking losses", &self.num_losses),
            ("longest sequence without tracking loss", &self.longest_run),
        ]
    }

    /// Aligned text table with the columns `mean (std)`, `median`, `range`.
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows()
            .iter()
            .map(|(name, s)| [name.to_string(), s.mean_std(2), plain(s.median), s.range()])
            .collect();
        table(["", "mean (std)", "median", "range"], &cells)
    }
}

fn table<const N: usize>(header: [&str; N], rows: &[[String; N]]) -> String {
    let mut width = header.map(|h| h.chars().count());
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub frames: usize,
    pub rotation_rmse_deg: f64,
    pub translation_rmse_mm: f64,
    pub rotation_deg: Summary,
    pub translation_mm: Summary,
}

impl PoseErrorReport {
    /// Compares estimates to ground truth frame by frame over the shorter
    /// of the two sequences; lost frames are included with their held pose.
    pub fn compare(estimated: &[RigidPose], truth: &[RigidPose]) -> Option<Self> {
        let (rot, trans): (Vec<f64>, Vec<f64>) = estimated.iter().zip(truth).map(|(e, t)| pose_difference(e, t)).unzip();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        Some(Self {
            frames: rot.len(),
            rotation_rmse_deg: rms(&rot),
            translation_rmse_mm: rms(&trans),
            rotation_deg: Summary::of(&rot)?,
            translation_mm: Summary::of(&trans)?,
        })
    }

    pub fn to_table(&self) -> String {
        let row = |name: &str, rmse: f64, s: &Summary| [name.to_string(), format!("{rmse:.4}"), s.mean_std(4), format!("{:.4}", s.max)];
        table(
            ["pose error", "rmse", "mean(std)", "max"],
            &[row("rotation (deg)", self.rotation_rmse_deg, &self.rotation_deg), row("translation (mm)", self.translation_rmse_mm, &self.translation_mm)],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub scores: Vec<f64>,
    pub summary: Summary,
}

impl DiceReport {
    pub fn from_scores(scores: Vec<f64>) -> Option<Self> {
        Some(Self { summary: Summary::of(&scores)?, scores })
    }

    /// `images  mean(std)` with four decimals, e.g. `0.9408(0.0389)`.
    pub fn to_table(&self) -> String {
        table(["set", "images", "mean(std)"], &[["eval".into(), self.summary.count.to_string(), self.summary.mean_std(4)]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub robustness: RobustnessReport,
    pub pose: Option<PoseErrorReport>,
    pub dice: Option<DiceReport>,
}

impl EvalReport {
    /// One robustness entry per sequence of track results.
    pub fn robustness_of(sequences: &[Vec<TrackResult>]) -> Option<RobustnessReport> {
        RobustnessReport::from_sequences(
            sequences.iter().map(|s| robustness_metrics(s.iter().map(|r| r.status))).collect(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = self.robustness.to_table();
        if let Some(p) = &self.pose {
            s.push('\n');
            s.push_str(&p.to_table());
        }
        if let Some(d) = &self.dice {
            s.push('\n');
            s.push_str(&d.to_table());
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Convenience for tests and the CLI.
pub fn statuses(results: &[TrackResult]) -> Vec<TrackStatus> {
    results.iter().map(|r| r.status).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Vec3;

    #[test]
    fn summary_of_small_set() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.count, s.mean, s.median, s.min, s.max), (4, 2.5, 2.5, 1.0, 4.0));
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[7.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn table_two_cell_format() {
        let s = Summary { count: 37, mean: 98.11, std: 54.65, median: 91.0, min: 21.0, max: 277.0 };
        assert_eq!(s.mean_std(2), "98.11(54.65)");
        assert_eq!(plain(s.median), "91");
        assert_eq!(s.range(), "[21, 277]");
        let l = Summary { count: 37, mean: 5.16, std: 3.67, median: 5.0, min: 0.0, max: 15.0 };
        assert_eq!(format!("{} & {} & {}", l.mean_std(2), plain(l.median), l.range()), "5.16(3.67) & 5 & [0, 15]");
        let r = Summary { count: 37, mean: 40.86, std: 30.85, median: 31.0, min: 4.0, max: 152.0 };
        assert_eq!(format!("{} & {} & {}", r.mean_std(2), plain(r.median), r.range()), "40.86(30.85) & 31 & [4, 152]");
    }

    #[test]
    fn table_one_cell_format() {
        let s = Summary { count: 178, mean: 0.9408, std: 0.0389, median: 0.0, min: 0.0, max: 0.0 };
        assert_eq!(s.mean_std(4), "0.9408(0.0389)");
    }

    #[test]
    fn robustness_table_columns() {
        use TrackStatus::{Lost as L, Tracked as T};
        let a = robustness_metrics([T, T, L, T, T, T, L]);
        let b = robustness_metrics([T; 10]);
        let rep = RobustnessReport::from_sequences(vec![a, b]).unwrap();
        assert_eq!(rep.total_frames.mean, 8.5);
        assert_eq!(rep.num_losses.range(), "[0, 2]");
        assert_eq!(rep.longest_run.median, 6.5);
        let t = rep.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("mean (std)") && lines[0].contains("median") && lines[0].ends_with("range"));
        assert!(lines[2].starts_with("no. of tracking losses") && lines[2].contains("1.00(1.41)") && lines[2].ends_with("[0, 2]"));
        assert!(lines[3].contains("6.50"));
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let poses: Vec<RigidPose> = (0..5).map(|k| RigidPose::rotation_about(Vec3::new(0.0, 50.0, 0.0), Vec3::z(), 0.03 * k as f64)).collect();
        let rep = PoseErrorReport::compare(&poses, &poses).unwrap();
        assert_eq!((rep.frames, rep.rotation_rmse_deg, rep.translation_rmse_mm), (5, 0.0, 0.0));
    }

    #[test]
    fn translation_rmse_matches_hand_computation() {
        let gt = vec![RigidPose::identity(); 2];
        let est = vec![RigidPose::from_translation(Vec3::new(3.0, 0.0, 0.0)), RigidPose::from_translation(Vec3::new(0.0, 4.0, 0.0))];
        let rep = PoseErrorReport::compare(&est, &gt).unwrap();
        assert!((rep.translation_rmse_mm - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rep.rotation_rmse_deg, 0.0);
    }

    #[test]
    fn json_has_table_fields() {
        let rep = EvalReport {
            robustness: RobustnessReport::from_sequences(vec![robustness_metrics([TrackStatus::Tracked; 3])]).unwrap(),
            pose: None,
            dice: DiceReport::from_scores(vec![0.9, 0.95]),
        };
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for key in ["total_frames", "num_losses", "longest_run"] {
            for f in ["mean", "std", "median", "min", "max"] {
                assert!(v["robustness"][key][f].is_number(), "{key}.{f}");
            }
        }
        assert!((v["dice"]["summary"]["mean"].as_f64().unwrap() - 0.925).abs() < 1e-12);
        assert!(rep.to_text().contains("0.9250(0.0354)"));
    }
}
