use crate::error::{Error, Result};
use crate::imaging::Frame;
use crate::registration::{joint_histogram_parzen, nmi, RegistrationConfig};

/// Integer pull-back shift with border clamping: `out(x) = frame(x + shift)`.
pub fn shift_frame(frame: &Frame, dx: i64, dy: i64) -> Frame {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut data = Vec::with_capacity(frame.data.len());
    for y in 0..h {
        let sy = (y + dy).clamp(0, h - 1);
        for x in 0..w {
            let sx = (x + dx).clamp(0, w - 1);
            data.push(frame.data[(sy * w + sx) as usize]);
        }
    }
    Frame {
        data,
        ..frame.clone()
    }
}

/// Exhaustive translation search maximizing hard-binned NMI.
///
/// Returns the pull-back shift `s` for which `shift_frame(moving, s)` best
/// matches `fixed`. Ties go to the smallest `|s|`, then to the
/// lexicographically smallest `(dx, dy)`.
pub fn register_rigid(fixed: &Frame, moving: &Frame, max_shift: usize) -> Result<(i64, i64)> {
    if !fixed.same_size(moving) {
        return Err(Error::Dimension("fixed and moving frames differ in size".into()));
    }
    let cfg = RegistrationConfig {
        parzen_width: 0.0,
        ..RegistrationConfig::default()
    };
    let r = max_shift as i64;
    let mut candidates: Vec<(i64, i64)> = (-r..=r).flat_map(|dx| (-r..=r).map(move |dy| (dx, dy))).collect();
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dx, dy));
    let mut best = (0, 0);
    let mut best_nmi = f64::NEG_INFINITY;
    for (dx, dy) in candidates {
        let value = nmi(&joint_histogram_parzen(fixed, &shift_frame(moving, dx, dy), &cfg)?);
        if value > best_nmi {
            best_nmi = value;
            best = (dx, dy);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::DiffusionMeta;

    fn blob_image(n: usize, cx: f64, cy: f64) -> Frame {
        let data = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                let r2 = (x - cx).powi(2) + 0.6 * (y - cy).powi(2);
                0.1 + 0.8 * (-r2 / 30.0).exp() + 0.05 * ((x * 0.7).sin() + (y * 0.4).cos())
            })
            .collect();
        Frame::new(n, n, data, DiffusionMeta::reference()).unwrap()
    }

    #[test]
    fn self_and_zero_radius() {
        let f = blob_image(32, 14.0, 17.0);
        assert_eq!(register_rigid(&f, &f, 4).unwrap(), (0, 0));
        let g = blob_image(32, 18.0, 12.0);
        assert_eq!(register_rigid(&f, &g, 0).unwrap(), (0, 0));
    }

    #[test]
    fn recovers_constructed_shift() {
        let n = 40;
        let fixed = blob_image(n, 20.0, 19.0);
        // moving content sits 3 px right and 1 px up of the fixed content
        let moving = shift_frame(&fixed, -3, 1);
        let s = register_rigid(&fixed, &moving, 5).unwrap();
        assert_eq!(s, (3, -1));
        let back = shift_frame(&moving, s.0, s.1);
        for y in 5..n - 5 {
            for x in 5..n - 5 {
                assert_eq!(back.data[y * n + x], fixed.data[y * n + x]);
            }
        }
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let f = blob_image(8, 4.0, 4.0);
        let g = blob_image(9, 4.0, 4.0);
        assert!(register_rigid(&f, &g, 1).is_err());
    }
}
