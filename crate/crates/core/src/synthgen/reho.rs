use crate::error::{Error, Result};

/// Midranks (1-based) of `xs`, plus the tie term Σ(t³ − t) over tie groups.
fn midranks(xs: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Kendall's coefficient of concordance of `v` voxel series over `t`
/// timepoints (`series` is voxel-major), with the tie correction.
pub fn compute_reho(series: &[f64], voxels: usize, timepoints: usize) -> Result<f64> {
    if voxels < 2 || timepoints < 2 {
        return Err(Error::invalid(
            "compute_reho",
            format!("need V ≥ 2 and T ≥ 2, got V={voxels}, T={timepoints}"),
        ));
    }
    if series.len() != voxels * timepoints {
        return Err(Error::shape("compute_reho", &[voxels, timepoints], &[series.len()]));
    }
    let mut rank_sums = vec![0.0; timepoints];
    let mut tie_total = 0.0;
    for row in series.chunks(timepoints) {
        let (r, ties) = midranks(row);
        rank_sums.iter_mut().zip(&r).for_each(|(s, v)| *s += v);
        tie_total += ties;
    }
    let (m, n) = (voxels as f64, timepoints as f64);
    let mean = m * (n + 1.0) / 2.0;
    let s: f64 = rank_sums.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = m * m * (n * n * n - n) - m * tie_total;
    if denom <= 0.0 {
        return Err(Error::invalid("compute_reho", "all series constant; concordance undefined"));
    }
    Ok((12.0 * s / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_concordant() {
        let row = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let series: Vec<f64> = row.iter().cycle().take(row.len() * 4).cloned().collect();
        assert!((compute_reho(&series, 4, row.len()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_pair_discordant() {
        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let mut series = a.clone();
        series.extend(a.iter().rev());
        assert!(compute_reho(&series, 2, 10).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_series_rejected() {
        assert!(compute_reho(&[1.0; 12], 3, 4).is_err());
        assert!(compute_reho(&[1.0; 4], 1, 4).is_err());
    }
}
