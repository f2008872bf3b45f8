//! Streaming per-slot attention statistics.
//!
//! Every retained slot keeps five running values fed by the attention rows it
//! receives: the accumulated probability, the accumulated squared
//! probability, how many rows it appeared in, how many of those rows put it
//! strictly above the row mean, and the most recent probability. All
//! importance scores and the standard-deviation scope are read off these.

/// Streaming statistics for the slots of one head cache, aligned slot-for-slot
/// with the cached keys and values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportanceStats {
    acc: Vec<f64>,
    acc_sq: Vec<f64>,
    count: Vec<u32>,
    quant_acc: Vec<u32>,
    last: Vec<f32>,
}

impl ImportanceStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        ImportanceStats {
            acc: Vec::with_capacity(n),
            acc_sq: Vec::with_capacity(n),
            count: Vec::with_capacity(n),
            quant_acc: Vec::with_capacity(n),
            last: Vec::with_capacity(n),
        }
    }

    /// Builds statistics directly from per-slot values. Used by fixtures and
    /// by replay snapshots.
    pub fn from_parts(
        acc: Vec<f64>,
        acc_sq: Vec<f64>,
        count: Vec<u32>,
        quant_acc: Vec<u32>,
        last: Vec<f32>,
    ) -> Self {
        let n = acc.len();
        assert!(
            acc_sq.len() == n && count.len() == n && quant_acc.len() == n && last.len() == n,
            "statistics arrays must be aligned"
        );
        ImportanceStats {
            acc,
            acc_sq,
            count,
            quant_acc,
            last,
        }
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn acc(&self) -> &[f64] {
        &self.acc
    }

    pub fn acc_sq(&self) -> &[f64] {
        &self.acc_sq
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    pub fn quant_acc(&self) -> &[u32] {
        &self.quant_acc
    }

    pub fn last(&self) -> &[f32] {
        &self.last
    }

    /// Opens a zeroed slot for a newly appended token.
    pub(crate) fn push_slot(&mut self) {
        self.acc.push(0.0);
        self.acc_sq.push(0.0);
        self.count.push(0);
        self.quant_acc.push(0);
        self.last.push(0.0);
    }

    /// Folds one attention row into the accumulators. When `skip_newest` is
    /// set the final slot (the token that produced the row) is left untouched.
    pub(crate) fn observe(&mut self, probs: &[f32], skip_newest: bool) {
        debug_assert_eq!(probs.len(), self.len());
        let n = probs.len();
        let mean = 1.0 / n as f64;
        let upto = if skip_newest { n.saturating_sub(1) } else { n };
        for (i, &p) in probs.iter().enumerate().take(upto) {
            let p64 = f64::from(p);
            self.acc[i] += p64;
            self.acc_sq[i] += p64 * p64;
            self.count[i] += 1;
            self.last[i] = p;
            if p64 > mean {
                self.quant_acc[i] += 1;
            }
        }
    }

    pub(crate) fn retain(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.acc, keep);
        filter(&mut self.acc_sq, keep);
        filter(&mut self.count, keep);
        filter(&mut self.quant_acc, keep);
        filter(&mut self.last, keep);
    }

    /// Mean attention score `acc / count`; zero for a slot never attended.
    pub fn mean(&self, i: usize) -> f64 {
        match self.count[i] {
            0 => 0.0,
            c => self.acc[i] / f64::from(c),
        }
    }

    /// Standard deviation of the probabilities slot `i` has received,
    /// `sqrt(acc_sq/count - (acc/count)^2)`.
    pub fn std(&self, i: usize) -> f64 {
        streaming_std(self.acc[i], self.acc_sq[i], self.count[i])
    }
}

/// `sqrt(E[x^2] - E[x]^2)` from running sums.
///
/// A radicand within 1e-12 of `E[x^2]` is rounding noise from the
/// subtraction and is treated as zero variance, as is a negative one.
pub fn streaming_std(acc: f64, acc_sq: f64, count: u32) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let c = f64::from(count);
    let mean_sq = acc_sq / c;
    let mean = acc / c;
    let var = mean_sq - mean * mean;
    if var <= 1e-12 * mean_sq {
        0.0
    } else {
        var.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_full_row_is_not_above_average() {
        let mut s = ImportanceStats::new();
        s.push_slot();
        s.observe(&[1.0], false);
        assert_eq!(s.acc(), &[1.0]);
        assert_eq!(s.acc_sq(), &[1.0]);
        assert_eq!(s.count(), &[1]);
        assert_eq!(s.quant_acc(), &[0]);
        assert_eq!(s.std(0), 0.0);
    }

    #[test]
    fn uniform_row_quantizes_to_zero() {
        let mut s = ImportanceStats::new();
        for _ in 0..4 {
            s.push_slot();
        }
        s.observe(&[0.25; 4], false);
        assert_eq!(s.quant_acc(), &[0, 0, 0, 0]);
    }

    #[test]
    fn two_updates_accumulate() {
        let mut s = ImportanceStats::new();
        s.push_slot();
        s.observe(&[0.2], false);
        s.observe(&[0.4], false);
        // history-keeping oracle
        let hist = [0.2f32, 0.4];
        let acc: f64 = hist.iter().map(|&p| f64::from(p)).sum();
        let acc_sq: f64 = hist.iter().map(|&p| f64::from(p) * f64::from(p)).sum();
        assert!((s.acc()[0] - acc).abs() < 1e-12);
        assert!((s.acc()[0] - 0.6).abs() < 1e-6);
        assert!((s.acc_sq()[0] - acc_sq).abs() < 1e-12);
        assert!((s.acc_sq()[0] - 0.20).abs() < 1e-6);
        assert_eq!(s.count(), &[2]);
        assert!((s.mean(0) - 0.3).abs() < 1e-6);
        assert!((s.std(0) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn skip_newest_leaves_last_slot() {
        let mut s = ImportanceStats::new();
        s.push_slot();
        s.push_slot();
        s.observe(&[0.7, 0.3], true);
        assert_eq!(s.count(), &[1, 0]);
        assert_eq!(s.mean(1), 0.0);
        assert_eq!(s.std(1), 0.0);
    }

    #[test]
    fn constant_history_has_zero_std() {
        let mut s = ImportanceStats::new();
        s.push_slot();
        for _ in 0..200 {
            s.observe(&[0.1], false);
        }
        assert_eq!(s.std(0), 0.0);
    }

    #[test]
    fn retain_keeps_alignment() {
        let mut s = ImportanceStats::new();
        for _ in 0..3 {
            s.push_slot();
        }
        s.observe(&[0.5, 0.3, 0.2], false);
        s.retain(&[true, false, true]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.last(), &[0.5, 0.2]);
    }
}
