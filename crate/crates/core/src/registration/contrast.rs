use crate::error::Result;
use crate::imaging::Frame;
use crate::registration::histogram::check_unit_range;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub frame: Frame,
    /// Set when the moving frame was constant and returned as is.
    pub unchanged: bool,
}

/// Rank-based remapping of `moving` so its empirical CDF follows `fixed`.
///
/// Each moving pixel takes the fixed quantile at its rank; tied pixels share
/// the quantile of their mean rank, so the map is monotone.
pub fn histogram_match(moving: &Frame, fixed: &Frame) -> Result<MatchOutcome> {
    check_unit_range(moving, "moving")?;
    check_unit_range(fixed, "fixed")?;
    let first = moving.data[0];
    if moving.data.iter().all(|v| *v == first) {
        return Ok(MatchOutcome {
            frame: moving.clone(),
            unchanged: true,
        });
    }
    let mut reference = fixed.data.clone();
    reference.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..moving.data.len()).collect();
    order.sort_by(|a, b| moving.data[*a].total_cmp(&moving.data[*b]));

    let n = order.len() as f64;
    let m = reference.len();
    let mut data = vec![0.0; order.len()];
    let mut start = 0;
    while start < order.len() {
        let value = moving.data[order[start]];
        let mut end = start;
        while end < order.len() && moving.data[order[end]] == value {
            end += 1;
        }
        let mean_rank = (start + end - 1) as f64 / 2.0;
        let idx = (((mean_rank + 0.5) / n) * m as f64).floor() as usize;
        let target = reference[idx.min(m - 1)];
        for &i in &order[start..end] {
            data[i] = target;
        }
        start = end;
    }
    Ok(MatchOutcome {
        frame: Frame {
            data,
            ..moving.clone()
        },
        unchanged: false,
    })
}
