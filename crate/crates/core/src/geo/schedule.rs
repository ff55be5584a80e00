use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which encoder layers feed which decoder layers.
///
/// `sampled[j-1]` is `k_j`, injected into decoder layer `j` (ascending:
/// shallowest sampled layer goes to the first decoder layer). `anchor` is the
/// terminal layer `K`, reserved for input-level anchoring.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub sampled: Vec<usize>,
    pub anchor: usize,
    pub m: usize,
    /// Set when the arithmetic progression had to be adjusted to stay in range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjustment: Option<String>,
}

impl InjectionSchedule {
    /// The `m = 0` baseline: anchoring only.
    pub fn baseline(total_layers: usize) -> Self {
        Self {
            sampled: Vec::new(),
            anchor: total_layers,
            m: 0,
            adjustment: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.sampled.len()
    }

    /// `(encoder layer k_j, decoder layer j)` pairs, `j` 1-based.
    pub fn decoder_targets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sampled.iter().enumerate().map(|(i, &k)| (k, i + 1))
    }
}

/// Pick `m` encoder layers out of `K`, skipping the shallow quarter and the terminal layer.
///
/// `k_j = ⌊K/4⌋ + j·s − 1` with `s = ⌊(K − ⌊K/4⌋)/m⌋`. For `K = 24, m = 6`
/// this gives `[8, 11, 14, 17, 20, 23]`. When `s = 1` the progression would
/// start at `⌊K/4⌋` itself, so it is shifted up by one; indices past `K−1`
/// are clipped and deduplicated. Both adjustments are reported.
pub fn sample_layers(total_layers: usize, m: usize) -> Result<InjectionSchedule> {
    let k = total_layers;
    if k < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 encoder layers, got {k}")));
    }
    if m == 0 {
        return Ok(InjectionSchedule::baseline(k));
    }
    let quarter = k / 4;
    let max_m = k - quarter - 1;
    if m > max_m {
        return Err(Error::InvalidArgument(format!(
            "injection depth {m} out of range 0..={max_m} for K = {k}"
        )));
    }
    let stride = (k - quarter) / m;
    let mut sampled: Vec<usize> = (1..=m).map(|j| quarter + j * stride - 1).collect();
    let mut notes = Vec::new();
    if sampled[0] <= quarter {
        sampled.iter_mut().for_each(|v| *v += 1);
        notes.push(format!("shifted by +1 so every index exceeds {quarter}"));
    }
    if sampled.iter().any(|&v| v > k - 1) {
        sampled.iter_mut().for_each(|v| *v = (*v).min(k - 1));
        sampled.dedup();
        notes.push(format!("clipped to {} and deduplicated", k - 1));
    }
    Ok(InjectionSchedule {
        sampled,
        anchor: k,
        m,
        adjustment: (!notes.is_empty()).then(|| notes.join("; ")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configuration() {
        let s = sample_layers(24, 6).unwrap();
        assert_eq!(s.sampled, vec![8, 11, 14, 17, 20, 23]);
        assert_eq!(s.anchor, 24);
        assert!(s.adjustment.is_none());
    }

    #[test]
    fn baseline_is_empty() {
        let s = sample_layers(24, 0).unwrap();
        assert!(s.sampled.is_empty());
        assert_eq!(s.anchor, 24);
    }

    #[test]
    fn three_layers_stride_six() {
        assert_eq!(sample_layers(24, 3).unwrap().sampled, vec![11, 17, 23]);
    }

    #[test]
    fn unit_stride_is_shifted() {
        let s = sample_layers(24, 10).unwrap();
        assert_eq!(s.sampled, (7..=16).collect::<Vec<_>>());
        assert!(s.adjustment.is_some());
    }

    #[test]
    fn out_of_range() {
        assert!(sample_layers(24, 18).is_err());
        assert!(sample_layers(7, 1).is_err());
        assert_eq!(sample_layers(24, 17).unwrap().sampled.len(), 17);
    }

    #[test]
    fn targets_are_ascending() {
        let s = sample_layers(24, 6).unwrap();
        let t: Vec<_> = s.decoder_targets().collect();
        assert_eq!(t[0], (8, 1));
        assert_eq!(t[5], (23, 6));
    }
}
