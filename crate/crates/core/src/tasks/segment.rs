/// Group sizes for merging `n` native steps into at most `max_steps` groups:
/// contiguous, balanced, larger groups first.
pub fn group_sizes(n: usize, max_steps: usize) -> Vec<usize> {
    if n <= max_steps || max_steps == 0 {
        return vec![1; n];
    }
    let (q, r) = (n / max_steps, n % max_steps);
    (0..max_steps).map(|i| q + usize::from(i < r)).collect()
}

/// Merges adjacent native steps so that at most `max_steps` remain; each merged
/// step is the in-order concatenation of its members.
pub fn segment_rationale<T: Clone>(native: &[Vec<T>], max_steps: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut at = 0;
    for size in group_sizes(native.len(), max_steps) {
        out.push(native[at..at + size].concat());
        at += size;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_steps_merge_to_four_three_three() {
        assert_eq!(group_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(group_sizes(7, 3), vec![3, 2, 2]);
    }

    #[test]
    fn short_rationales_are_unchanged() {
        let native = vec![vec![1, 2], vec![3]];
        assert_eq!(segment_rationale(&native, 3), native);
    }

    #[test]
    fn partition_rule_holds_for_1_to_20() {
        for n in 1..=20 {
            let native: Vec<Vec<usize>> = (0..n).map(|i| vec![i, 100 + i]).collect();
            let merged = segment_rationale(&native, 3);
            assert_eq!(merged.len(), n.min(3));
            assert_eq!(merged.concat(), native.concat(), "n={n}");
            let sizes = group_sizes(n, 3);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
            for (m, s) in merged.iter().zip(&sizes) {
                assert_eq!(m.len(), 2 * s);
            }
        }
    }
}
