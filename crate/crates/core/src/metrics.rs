//! Evaluation metrics: rank correlations, regression errors, the frozen
//! embedding probe, and embedding-collapse diagnostics.

use thiserror::Error;

use crate::losses::delta;
use crate::tensor::{NumericError, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("inputs have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("correlation undefined: {0}")]
    Undefined(&'static str),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// One named metric value with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, n: usize) -> Self {
        MetricReport {
            metric: metric.to_string(),
            value,
            n,
        }
    }
}

fn check_paired(x: &[f64], y: &[f64], need: usize) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < need {
        return Err(MetricsError::TooFew {
            need,
            got: x.len(),
        });
    }
    Ok(())
}

/// Kendall's tau-b (tie-corrected), computed by sorting plus a merge-sort
/// discordance count rather than pair enumeration.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_paired(x, y, 2)?;
    let n = x.len();
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return Err(MetricsError::Undefined("all values tied"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap()
            .then(y[a].partial_cmp(&y[b]).unwrap())
    });

    // Tie counts; pairs(t) = t * (t - 1) / 2 per tie group.
    let pairs = |t: u64| t * (t - 1) / 2;
    let mut ties_x = 0u64;
    let mut ties_xy = 0u64;
    let mut run_x = 1u64;
    let mut run_xy = 1u64;
    for w in idx.windows(2) {
        if x[w[0]] == x[w[1]] {
            run_x += 1;
            if y[w[0]] == y[w[1]] {
                run_xy += 1;
            } else {
                ties_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += pairs(run_x);
            run_x = 1;
            ties_xy += pairs(run_xy);
            run_xy = 1;
        }
    }
    ties_x += pairs(run_x);
    ties_xy += pairs(run_xy);

    // Discordant pairs = exchanges needed to sort the y-sequence.
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_y = 0u64;
    let mut sorted_y = y.to_vec();
    sorted_y.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut run_y = 1u64;
    for w in sorted_y.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            ties_y += pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += pairs(run_y);

    let n0 = pairs(n as u64);
    let num = n0 as i128 - ties_x as i128 - ties_y as i128 + ties_xy as i128
        - 2 * swaps as i128;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(MetricsError::Undefined("all values tied"));
    }
    Ok(num as f64 / denom)
}

/// Counts inversions while merge-sorting in place.
fn merge_count(values: &mut [f64]) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut left = values[..mid].to_vec();
    let mut right = values[mid..].to_vec();
    let mut swaps = merge_count(&mut left) + merge_count(&mut right);
    let (mut i, mut j) = (0, 0);
    for slot in values.iter_mut() {
        if i < left.len() && (j >= right.len() || left[i] <= right[j]) {
            *slot = left[i];
            i += 1;
        } else {
            if i < left.len() {
                swaps += (left.len() - i) as u64;
            }
            *slot = right[j];
            j += 1;
        }
    }
    swaps
}

/// Average ranks with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_paired(x, y, 2)?;
    pearson_r(&average_ranks(x), &average_ranks(y))
}

/// Pearson's r.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_paired(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(MetricsError::Undefined("zero variance"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], gold: &[f64]) -> Result<f64, MetricsError> {
    check_paired(pred, gold, 1)?;
    Ok(pred
        .iter()
        .zip(gold)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Fraction of exactly matching labels.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

const RIDGE_ALPHA: f64 = 1e-3;
const PROBE_FOLDS: usize = 5;

/// Closed-form ridge-regression probe from frozen embeddings to valence,
/// 5-fold cross-validated. Out-of-fold predictions are pooled, then scored
/// as `probe_r`, `probe_mae`, `probe_rho`, `probe_tau`.
pub fn valence_probe(
    embeddings: &Tensor,
    valences: &[f64],
) -> Result<Vec<MetricReport>, MetricsError> {
    let n = embeddings.rows()?;
    let d = embeddings.cols()?;
    if n != valences.len() {
        return Err(MetricsError::LengthMismatch(n, valences.len()));
    }
    if n < 10 {
        return Err(MetricsError::TooFew { need: 10, got: n });
    }
    let mut pred = Vec::with_capacity(n);
    let mut gold = Vec::with_capacity(n);
    for fold in 0..PROBE_FOLDS {
        let test: Vec<usize> = (0..n).filter(|i| i % PROBE_FOLDS == fold).collect();
        let train: Vec<usize> = (0..n).filter(|i| i % PROBE_FOLDS != fold).collect();
        if test.is_empty() || train.len() < d + 1 {
            continue;
        }
        // Normal equations over [X 1] with the intercept unpenalized.
        let k = d + 1;
        let mut ata = vec![0.0; k * k];
        let mut atb = vec![0.0; k];
        for &i in &train {
            let row = embeddings.row(i)?;
            let feat = |j: usize| if j < d { row[j] } else { 1.0 };
            for a in 0..k {
                for b in a..k {
                    ata[a * k + b] += feat(a) * feat(b);
                }
                atb[a] += feat(a) * valences[i];
            }
        }
        for a in 0..k {
            for b in 0..a {
                ata[a * k + b] = ata[b * k + a];
            }
        }
        for j in 0..d {
            ata[j * k + j] += RIDGE_ALPHA;
        }
        let Some(beta) = cholesky_solve(&ata, &atb, k) else {
            eprintln!("warning: singular fold {fold} skipped in valence probe");
            continue;
        };
        for &i in &test {
            let row = embeddings.row(i)?;
            let mut p = beta[d];
            for j in 0..d {
                p += beta[j] * row[j];
            }
            pred.push(p);
            gold.push(valences[i]);
        }
    }
    if pred.len() < 2 {
        return Err(MetricsError::Undefined("no successful probe folds"));
    }
    Ok(vec![
        MetricReport::new("probe_r", pearson_r(&pred, &gold)?, pred.len()),
        MetricReport::new("probe_mae", mae(&pred, &gold)?, pred.len()),
        MetricReport::new("probe_rho", spearman_rho(&pred, &gold)?, pred.len()),
        MetricReport::new("probe_tau", kendall_tau(&pred, &gold)?, pred.len()),
    ])
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky;
/// `None` if a pivot collapses.
fn cholesky_solve(a: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i * k + j];
            for p in 0..j {
                sum -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * k + i] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut sum = b[i];
        for p in 0..i {
            sum -= l[i * k + p] * y[p];
        }
        y[i] = sum / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut sum = y[i];
        for p in i + 1..k {
            sum -= l[p * k + i] * x[p];
        }
        x[i] = sum / l[i * k + i];
    }
    Some(x)
}

/// Geometry diagnostics for an embedded, valence-annotated sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseDiagnostics {
    /// Mean squared distance between normalized embeddings of pairs with
    /// valence similarity >= 0.9; absent when no pair qualifies.
    pub alignment: Option<f64>,
    /// `log mean exp(-2 ||hi - hj||^2)` over all pairs of normalized
    /// embeddings; 0 means total collapse, more negative means more spread.
    pub uniformity: f64,
    /// Spearman correlation between pairwise valence similarity and pairwise
    /// cosine similarity; absent when either side has zero variance.
    pub valence_rank_corr: Option<f64>,
}

/// Compute alignment, uniformity, and the valence/cosine rank correlation
/// over all embedding pairs.
pub fn collapse_diagnostics(
    embeddings: &Tensor,
    valences: &[f64],
) -> Result<CollapseDiagnostics, MetricsError> {
    let n = embeddings.rows()?;
    let d = embeddings.cols()?;
    if n != valences.len() {
        return Err(MetricsError::LengthMismatch(n, valences.len()));
    }
    if n < 10 {
        return Err(MetricsError::TooFew { need: 10, got: n });
    }
    // Normalize rows once.
    let mut normed = vec![0.0; n * d];
    for i in 0..n {
        let row = embeddings.row(i)?;
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for j in 0..d {
            normed[i * d + j] = row[j] / norm;
        }
    }
    let mut align_sum = 0.0;
    let mut align_count = 0usize;
    let mut unif_sum = 0.0;
    let mut deltas = Vec::with_capacity(n * (n - 1) / 2);
    let mut cosines = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &normed[i * d..(i + 1) * d];
            let b = &normed[j * d..(j + 1) * d];
            let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let dist_sq = (2.0 - 2.0 * cos).max(0.0);
            let dv = delta(valences[i], valences[j]);
            if dv >= 0.9 {
                align_sum += dist_sq;
                align_count += 1;
            }
            unif_sum += (-2.0 * dist_sq).exp();
            deltas.push(dv);
            cosines.push(cos);
        }
    }
    let pair_count = (n * (n - 1) / 2) as f64;
    let uniformity = (unif_sum / pair_count).ln();
    let alignment = if align_count > 0 {
        Some(align_sum / align_count as f64)
    } else {
        None
    };
    let valence_rank_corr = spearman_rho(&deltas, &cosines).ok();
    Ok(CollapseDiagnostics {
        alignment,
        uniformity,
        valence_rank_corr,
    })
}

/// Render reports as the `metric,value,n` CSV (header row, LF endings).
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("metric,value,n\n");
    for r in reports {
        out.push_str(&format!("{},{},{}\n", r.metric, r.value, r.n));
    }
    out
}
