use super::{Real, Tensor};

/// Softmax of `scores` within each group of `segments`. Each group's outputs
/// sum to one; groups with no members produce nothing.
pub fn segment_softmax<T: Real>(scores: &[T], segments: &[usize]) -> Vec<T> {
    assert_eq!(scores.len(), segments.len());
    let n_groups = segments.iter().max().map_or(0, |m| m + 1);
    let mut max = vec![T::neg_infinity(); n_groups];
    for (&s, &g) in scores.iter().zip(segments) {
        max[g] = max[g].max(s);
    }
    let mut out: Vec<T> = scores
        .iter()
        .zip(segments)
        .map(|(&s, &g)| (s - max[g]).exp())
        .collect();
    let mut denom = vec![T::zero(); n_groups];
    for (&e, &g) in out.iter().zip(segments) {
        denom[g] += e;
    }
    for (e, &g) in out.iter_mut().zip(segments) {
        *e = *e / denom[g];
    }
    out
}

/// Per-group mean of the rows of `values` (`E×D`). Empty groups give a zero
/// row.
pub fn segment_mean<T: Real>(values: &Tensor<T>, segments: &[usize], n_groups: usize) -> Tensor<T> {
    let (rows, cols) = values.dims2();
    assert_eq!(rows, segments.len());
    let mut out = vec![T::zero(); n_groups * cols];
    let counts = segment_counts(segments, n_groups);
    for (r, &g) in segments.iter().enumerate() {
        let dst = &mut out[g * cols..(g + 1) * cols];
        for (d, &v) in dst.iter_mut().zip(values.row(r)) {
            *d += v;
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = T::one() / T::from_usize(c).unwrap();
            out[g * cols..(g + 1) * cols].iter_mut().for_each(|v| *v *= inv);
        }
    }
    Tensor::new(vec![n_groups, cols], out).expect("segment_mean shape")
}

pub(crate) fn segment_counts(segments: &[usize], n_groups: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_groups];
    for &g in segments {
        counts[g] += 1;
    }
    counts
}
