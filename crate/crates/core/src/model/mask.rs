/// Per-token flags over a step's flattened batch: `true` means the token
/// precedes its request's invocation start and takes the base path.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationMask(Vec<bool>);

impl ActivationMask {
    pub fn new(values: Vec<bool>) -> Self {
        Self(values)
    }

    pub fn all(len: usize, value: bool) -> Self {
        Self(vec![value; len])
    }

    /// Mask for one contiguous span `[start_pos, start_pos + len)` whose
    /// request activates at `inv_start`.
    pub fn for_span(start_pos: usize, len: usize, inv_start: usize) -> Self {
        Self((start_pos..start_pos + len).map(|p| p < inv_start).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn extend(&mut self, other: &ActivationMask) {
        self.0.extend_from_slice(&other.0);
    }

    /// `true...true, false...false` within `range`.
    pub fn is_non_increasing(&self, range: std::ops::Range<usize>) -> bool {
        self.0[range].windows(2).all(|w| w[0] || !w[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_mask_splits_at_invocation() {
        let m = ActivationMask::for_span(0, 9, 6);
        assert_eq!(
            m.as_slice(),
            &[true, true, true, true, true, true, false, false, false]
        );
        assert!(m.is_non_increasing(0..9));
        assert_eq!(ActivationMask::for_span(20, 1, 6).as_slice(), &[false]);
        assert!(!ActivationMask::new(vec![false, true]).is_non_increasing(0..2));
    }
}
