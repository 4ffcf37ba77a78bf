use std::cmp::Ordering;

use super::MetricError;

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

pub(crate) fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(MetricError::DegenerateInput);
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting inversions (strictly decreasing pairs).
fn sort_counting_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps =
        sort_counting_swaps(&mut v[..mid], buf) + sort_counting_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b, computed in O(n log n) with Knight's algorithm.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let total = n * (n - 1) / 2;

    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_x = tied_pairs(&xs);

    let mut ties_xy = 0u64;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ties_xy += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties_xy += run * (run - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let discordant = sort_counting_swaps(&mut ys, &mut buf);
    let ties_y = tied_pairs(&ys);

    let denom_x = total - ties_x;
    let denom_y = total - ties_y;
    if denom_x == 0 || denom_y == 0 {
        return Err(MetricError::DegenerateInput);
    }
    // concordant - discordant over pairs untied in both coordinates
    let numer =
        total as i128 - ties_x as i128 - ties_y as i128 + ties_xy as i128 - 2 * discordant as i128;
    let tau = numer as f64 / ((denom_x as f64) * (denom_y as f64)).sqrt();
    Ok(tau.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn pearson_examples() {
        assert!(close(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0));
        assert!(close(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0));
        // means 2.5/2.5, cov sum 4, var sums 5 and 5
        assert!(close(
            pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(),
            0.8
        ));
        assert_eq!(
            pearson(&[1., 1., 1.], &[1., 2., 3.]),
            Err(MetricError::DegenerateInput)
        );
        assert_eq!(pearson(&[1.], &[1.]), Err(MetricError::TooShort(1)));
        assert!(matches!(
            pearson(&[1., 2.], &[1.]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn spearman_examples() {
        assert!(close(
            spearman(&[1., 5., 9.], &[0.1, 0.2, 7.0]).unwrap(),
            1.0
        ));
        assert!(close(
            spearman(&[1., 5., 9.], &[7.0, 0.2, 0.1]).unwrap(),
            -1.0
        ));
        assert_eq!(average_ranks(&[1., 2., 2., 3.]), vec![1.0, 2.5, 2.5, 4.0]);
        let expected = pearson(&[1.0, 2.5, 2.5, 4.0], &[1., 2., 3., 4.]).unwrap();
        assert!(close(
            spearman(&[1., 2., 2., 3.], &[1., 2., 3., 4.]).unwrap(),
            expected
        ));
    }

    #[test]
    fn kendall_examples() {
        // 6 pairs: only (2,3) is discordant
        assert!(close(
            kendall(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(),
            4.0 / 6.0
        ));
        assert!(close(kendall(&[3., 1., 2.], &[3., 1., 2.]).unwrap(), 1.0));
        assert!(close(kendall(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0));
        assert_eq!(
            kendall(&[2., 2.], &[1., 3.]),
            Err(MetricError::DegenerateInput)
        );
    }
}
