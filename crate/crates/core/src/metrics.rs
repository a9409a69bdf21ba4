//! Binary aggregation of 5-way outputs, sample diversity, overlap and AUC.

/// Probabilities `(p_b, p_m)`: each logit row is re-normalized over modes
/// 1, 2, 4 and 5 (mode 3 dropped), the rows are averaged, then
/// `p_b = p1 + p2` and `p_m = p4 + p5`.
pub fn aggregate_binary(rows: &[[f64; 5]]) -> (f64, f64) {
    assert!(!rows.is_empty(), "aggregate_binary needs at least one row");
    let mut mean = [0.0; 4];
    for r in rows {
        let l = [r[0], r[1], r[3], r[4]];
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = l.map(|v| (v - m).exp());
        let z: f64 = e.iter().sum();
        for (acc, v) in mean.iter_mut().zip(e) {
            *acc += v / z;
        }
    }
    let n = rows.len() as f64;
    let p = mean.map(|v| v / n);
    let pb = p[0] + p[1];
    let pm = p[2] + p[3];
    // Renormalize away the last bits of rounding so the pair sums to one.
    let s = pb + pm;
    (pb / s, pm / s)
}

pub fn softmax5(logits: &[f64; 5]) -> [f64; 5] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

/// Mean over the five modes of the population standard deviation across
/// samples; 0 for a single sample. Each column is summed in sorted order,
/// so the result does not depend on the order of the samples.
pub fn diversity(probs: &[[f64; 5]]) -> f64 {
    let n = probs.len();
    if n <= 1 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..5 {
        let mut col: Vec<f64> = probs.iter().map(|r| r[i]).collect();
        col.sort_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / 5.0
}

/// `2|A∩B| / (|A| + |B|)`, or 1 when both are empty.
pub fn dice_coefficient(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "dice_coefficient needs equal-length masks");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks
/// for tied scores. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let pos = pos as u64;
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Some(twice_u as f64 / (2 * pos * neg as u64) as f64)
}

/// Fixed-width histogram; values past the last edge land in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, width: f64, bins: usize) -> Self {
        Histogram { edges: (0..=bins).map(|i| lo + width * i as f64).collect(), counts: vec![0; bins] }
    }

    /// Bins of width 0.005 over `[0, 0.25]`.
    pub fn diversity() -> Self {
        Self::new(0.0, 0.005, 50)
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let width = self.edges[1] - self.edges[0];
        let k = ((v - self.edges[0]) / width).floor();
        let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
        self.counts[k] += 1;
    }
}
