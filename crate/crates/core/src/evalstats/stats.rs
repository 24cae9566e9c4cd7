use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::ptukey::studentized_range_sf;
use crate::error::{Error, Result};
use crate::seeds::SeedTree;

pub const DEFAULT_N_BOOT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
}

/// Linear-interpolated percentile of sorted data (`p` in [0, 1]).
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Means of `n_boot` resamples (with replacement); replicate `r` draws from
/// its own seed, so the result does not depend on scheduling.
pub fn bootstrap_means(values: &[f64], n_boot: usize, seed: u64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Stats("bootstrap needs at least one value".into()));
    }
    if n_boot == 0 {
        return Err(Error::Stats("bootstrap needs n_boot >= 1".into()));
    }
    let tree = SeedTree::new(seed);
    let n = values.len();
    // deviations from a pivot keep constant inputs exact
    let c = values[0];
    Ok(crate::par::map_range(n_boot, |r| {
        let mut rng = tree.index(r as u64).rng();
        let mut s = 0.0;
        for _ in 0..n {
            s += values[rng.random_range(0..n)] - c;
        }
        c + s / n as f64
    }))
}

/// Mean of resample means with a 2.5/97.5 percentile interval.
pub fn bootstrap_mean(values: &[f64], n_boot: usize, seed: u64) -> Result<BootstrapSummary> {
    let mut means = bootstrap_means(values, n_boot, seed)?;
    let c = values[0];
    let mean = c + means.iter().map(|m| m - c).sum::<f64>() / means.len() as f64;
    means.sort_by(f64::total_cmp);
    Ok(BootstrapSummary {
        mean,
        ci95_lo: percentile_sorted(&means, 0.025),
        ci95_hi: percentile_sorted(&means, 0.975),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
    pub ss_between: f64,
    pub ss_within: f64,
    pub ms_within: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::Stats(format!("need at least 2 groups, got {}", groups.len())));
    }
    let small: Vec<String> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() < 2)
        .map(|(i, g)| format!("group {i} has {} value(s)", g.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::Stats(small.join("; ")));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite observation".into()));
    }
    Ok(())
}

/// Classical one-way ANOVA. With zero within-group variance the result is
/// `F = inf, p = 0` when the group means differ and `F = 0, p = 1` when they
/// are all equal.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    check_groups(groups)?;
    let n: usize = groups.iter().map(Vec::len).sum();
    let k = groups.len();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = mean(g);
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let (dfb, dfw) = (k - 1, n - k);
    let msw = ssw / dfw as f64;
    let (f, p) = if ssw == 0.0 {
        if ssb == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let f = (ssb / dfb as f64) / msw;
        let x = dfw as f64 / (dfw as f64 + dfb as f64 * f);
        (f, beta_reg(dfw as f64 / 2.0, dfb as f64 / 2.0, x))
    };
    Ok(AnovaResult {
        f,
        df_between: dfb,
        df_within: dfw,
        p,
        ss_between: ssb,
        ss_within: ssw,
        ms_within: msw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub i: usize,
    pub j: usize,
    pub mean_diff: f64,
    pub q: f64,
    pub p: f64,
    pub significant: bool,
}

/// Tukey–Kramer pairwise comparisons (`i < j`, lexicographic order).
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<Vec<TukeyPair>> {
    let an = one_way_anova(groups)?;
    let k = groups.len() as u32;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let diff = means[j] - means[i];
            let se = (an.ms_within / 2.0 * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64)).sqrt();
            let q = if diff == 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                diff.abs() / se
            };
            let p = if q == 0.0 {
                1.0
            } else {
                studentized_range_sf(q, k, an.df_within as f64)?
            };
            out.push(TukeyPair {
                i,
                j,
                mean_diff: diff,
                q,
                p,
                significant: p < alpha,
            });
        }
    }
    Ok(out)
}
