use super::dataset::Dataset;

/// Coefficient of variation of one column; infinite when the mean is zero
/// but the column varies. `None` for constant columns.
fn coefficient_of_variation(values: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return None;
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return None;
    }
    Some(if mean == 0.0 { f64::INFINITY } else { var.sqrt() / mean.abs() })
}

/// Indices of the columns to keep: constant columns are dropped, and so are
/// columns whose coefficient of variation exceeds the 99th percentile
/// (nearest rank) of all non-constant columns' coefficients.
pub fn variance_filter(data: &Dataset) -> Vec<usize> {
    let d = data.n_features;
    let n = data.len();
    let cvs: Vec<Option<f64>> =
        (0..d).map(|f| coefficient_of_variation((0..n).map(move |i| f64::from(data.x[i * d + f])))).collect();
    let mut sorted: Vec<f64> = cvs.iter().flatten().copied().collect();
    if sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    (0..d).filter(|&f| cvs[f].is_some_and(|cv| cv <= threshold)).collect()
}
