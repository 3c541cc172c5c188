//! Multi-seed aggregation of run logs into per-episode confidence bands.

use std::collections::BTreeMap;
use std::io::Write;

use crate::ddpg::{EpisodeRecord, RunLog};
use crate::error::{Error, Result};

/// Normal-approximation 95% quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Reward,
    VScore,
    TScore,
    ChargeTime,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Reward, Metric::VScore, Metric::TScore, Metric::ChargeTime];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Reward => "cum_reward",
            Metric::VScore => "v_score",
            Metric::TScore => "t_score",
            Metric::ChargeTime => "charge_time_min",
        }
    }

    pub fn of(self, r: &EpisodeRecord) -> f64 {
        match self {
            Metric::Reward => r.cum_reward,
            Metric::VScore => r.v_score,
            Metric::TScore => r.t_score,
            Metric::ChargeTime => r.charge_time_min,
        }
    }
}

/// Mean and 95% band of one metric at one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRow {
    pub episode: usize,
    pub n: usize,
    pub mean: f64,
    pub half_width: f64,
}

/// Mean and `1.96 * stderr` half-width; a single sample has width 0.
pub fn mean_band(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * (var / n).sqrt()))
}

/// Per-episode band across seeds for training or evaluation records. Every
/// log must contain the same episodes.
pub fn aggregate(logs: &[RunLog], evaluated: bool, metric: Metric) -> Result<Vec<BandRow>> {
    if logs.is_empty() {
        return Err(Error::Empty("run log set"));
    }
    let mut by_episode: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut episodes_per_log = Vec::with_capacity(logs.len());
    for log in logs {
        let mut eps = Vec::new();
        for r in log.records.iter().filter(|r| r.evaluated == evaluated) {
            by_episode.entry(r.episode).or_default().push(metric.of(r));
            eps.push(r.episode);
        }
        episodes_per_log.push(eps);
    }
    if let Some(i) = episodes_per_log.iter().position(|e| *e != episodes_per_log[0]) {
        return Err(Error::InvalidConfig(format!(
            "run log {i} covers {} episodes but run log 0 covers {}; logs must come from the same schedule",
            episodes_per_log[i].len(),
            episodes_per_log[0].len()
        )));
    }
    by_episode
        .into_iter()
        .map(|(episode, values)| {
            let (mean, half_width) = mean_band(&values)?;
            Ok(BandRow {
                episode,
                n: values.len(),
                mean,
                half_width,
            })
        })
        .collect()
}

pub const PANEL_HEADER: [&str; 6] = ["group", "episode", "n", "mean", "lower", "upper"];

/// Tidy CSV of one panel; each group (for example an observation mode)
/// contributes its rows in order.
pub fn write_panel_csv<W: Write>(out: W, groups: &[(&str, Vec<BandRow>)]) -> Result<()> {
    let err = |e: csv::Error| Error::parse("panel csv", e);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_HEADER).map_err(err)?;
    for (group, rows) in groups {
        for r in rows {
            w.write_record([
                group.to_string(),
                r.episode.to_string(),
                r.n.to_string(),
                r.mean.to_string(),
                (r.mean - r.half_width).to_string(),
                (r.mean + r.half_width).to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::parse("panel csv", e))?;
    Ok(())
}

/// Median of a metric over a window of records.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn rec(episode: usize, reward: f64, evaluated: bool) -> EpisodeRecord {
        EpisodeRecord {
            episode,
            cum_reward: reward,
            v_score: -0.01,
            t_score: -5.0,
            charge_time_min: 20.0,
            steps: 20,
            evaluated,
        }
    }

    #[test]
    fn single_seed_has_zero_width() {
        let log = RunLog {
            records: vec![rec(0, -3.0, false), rec(1, -2.5, false)],
        };
        let rows = aggregate(&[log], false, Metric::Reward).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].mean, -2.5);
        assert_eq!(rows[1].half_width, 0.0);
    }

    #[test]
    fn five_seed_band_formula() {
        let values = [-3.0, -2.0, -2.5, -4.0, -1.5];
        let logs: Vec<RunLog> = values
            .iter()
            .map(|&v| RunLog {
                records: vec![rec(0, v, true), rec(0, 99.0, false)],
            })
            .collect();
        let rows = aggregate(&logs, true, Metric::Reward).unwrap();
        let mean = -2.6;
        let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        assert!((rows[0].mean - mean).abs() < 1e-12);
        assert!((rows[0].half_width - 1.96 * sd / 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rows[0].n, 5);
    }

    #[test]
    fn mismatched_logs_are_rejected() {
        let a = RunLog {
            records: vec![rec(0, -1.0, false), rec(1, -1.0, false)],
        };
        let b = RunLog {
            records: vec![rec(0, -1.0, false)],
        };
        assert!(aggregate(&[a, b], false, Metric::Reward).is_err());
        assert!(aggregate(&[], false, Metric::Reward).is_err());
    }

    #[test]
    fn panel_csv_is_stable() {
        let rows = vec![BandRow {
            episode: 3,
            n: 2,
            mean: -2.0,
            half_width: 0.5,
        }];
        let groups = [("full", rows.clone()), ("simplified", rows)];
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_panel_csv(&mut a, &groups).unwrap();
        write_panel_csv(&mut b, &groups).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            String::from_utf8(a).unwrap(),
            "group,episode,n,mean,lower,upper\nfull,3,2,-2,-2.5,-1.5\nsimplified,3,2,-2,-2.5,-1.5\n"
        );
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    proptest! {
        #[test]
        fn band_contains_mean(values in proptest::collection::vec(-100.0f64..100.0, 1..20)) {
            let (mean, w) = mean_band(&values).unwrap();
            prop_assert!(w >= 0.0);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean >= lo - 1e-9 && mean <= hi + 1e-9);
        }
    }
}
