//! Displacement metrics over multimodal ego forecasts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::scene::{Maneuver, MultimodalForecast};

pub const MISS_THRESHOLD: f64 = 2.0;
pub const HORIZONS_S: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn ade(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    traj.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64
}

pub fn fde(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    dist(*traj.last().expect("non-empty"), *gt.last().expect("non-empty"))
}

/// Best average and final displacement over the modes.
pub fn min_ade_fde(f: &MultimodalForecast, gt: &[[f64; 2]]) -> (f64, f64) {
    let a = f.modes.iter().map(|m| ade(&m.traj, gt)).fold(f64::INFINITY, f64::min);
    let d = f.modes.iter().map(|m| fde(&m.traj, gt)).fold(f64::INFINITY, f64::min);
    (a, d)
}

/// A miss is strictly beyond the threshold.
pub fn is_miss(min_fde: f64) -> bool {
    min_fde > MISS_THRESHOLD
}

/// Mode with the highest probability, lowest index on ties.
pub fn top_mode(f: &MultimodalForecast) -> usize {
    let mut best = 0;
    for (i, m) in f.modes.iter().enumerate() {
        if m.prob > f.modes[best].prob {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    /// RMSE of the most probable mode at 1..5 s; `None` past the horizon.
    pub rmse: Vec<Option<f64>>,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    /// Fraction of scenarios with minFDE below the miss threshold.
    pub accuracy: f64,
    pub per_maneuver_rmse: BTreeMap<String, Vec<Option<f64>>>,
    #[serde(default)]
    pub params: BTreeMap<String, usize>,
}

impl MetricsReport {
    pub fn csv(&self) -> String {
        let opt = |v: &Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let mut s = String::from("metric,value\n");
        s += &format!("count,{}\n", self.count);
        for (h, r) in HORIZONS_S.iter().zip(&self.rmse) {
            s += &format!("rmse_{h}s,{}\n", opt(r));
        }
        s += &format!("min_ade,{:.6}\nmin_fde,{:.6}\nmiss_rate,{:.6}\naccuracy,{:.6}\n", self.min_ade, self.min_fde, self.miss_rate, self.accuracy);
        for (m, rs) in &self.per_maneuver_rmse {
            for (h, r) in HORIZONS_S.iter().zip(rs) {
                s += &format!("rmse_{m}_{h}s,{}\n", opt(r));
            }
        }
        for (k, v) in &self.params {
            s += &format!("params_{k},{v}\n");
        }
        s
    }
}

fn rmse_at(items: &[(&MultimodalForecast, &[[f64; 2]])], dt: f64) -> Vec<Option<f64>> {
    HORIZONS_S
        .iter()
        .map(|h| {
            let step = (h / dt).round() as usize;
            if step == 0 || items.is_empty() || items.iter().any(|(_, g)| g.len() < step) {
                return None;
            }
            let se: f64 = items
                .iter()
                .map(|(f, g)| {
                    let m = &f.modes[top_mode(f)];
                    dist(m.traj[step - 1], g[step - 1]).powi(2)
                })
                .sum();
            Some((se / items.len() as f64).sqrt())
        })
        .collect()
}

/// Aggregates ego forecasts against ground truth.
pub fn evaluate_forecasts(items: &[(MultimodalForecast, Vec<[f64; 2]>, Maneuver)], dt: f64) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(contract("no forecasts to evaluate"));
    }
    let n = items.len() as f64;
    let mut ade_sum = 0.0;
    let mut fde_sum = 0.0;
    let mut misses = 0usize;
    let mut hits = 0usize;
    for (f, g, _) in items {
        let (a, d) = min_ade_fde(f, g);
        ade_sum += a;
        fde_sum += d;
        misses += is_miss(d) as usize;
        hits += (d < MISS_THRESHOLD) as usize;
    }
    let all: Vec<(&MultimodalForecast, &[[f64; 2]])> = items.iter().map(|(f, g, _)| (f, g.as_slice())).collect();
    let mut per_maneuver = BTreeMap::new();
    for m in Maneuver::ALL {
        let sub: Vec<_> = items.iter().filter(|(_, _, l)| *l == m).map(|(f, g, _)| (f, g.as_slice())).collect();
        if !sub.is_empty() {
            per_maneuver.insert(m.name().to_string(), rmse_at(&sub, dt));
        }
    }
    Ok(MetricsReport {
        count: items.len(),
        rmse: rmse_at(&all, dt),
        min_ade: ade_sum / n,
        min_fde: fde_sum / n,
        miss_rate: misses as f64 / n,
        accuracy: hits as f64 / n,
        per_maneuver_rmse: per_maneuver,
        params: BTreeMap::new(),
    })
}
