//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the scalar function under test, so it is
//! independent of the reverse-mode path it validates. Coordinates where both
//! gradients sit below the f32 differencing noise floor are skipped rather
//! than compared; at h=1e-3 the cancellation noise on a unit-scale function
//! is around 1e-4, so relative error there is meaningless.

/// Central difference of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_diff<F>(mut f: F, x: &[f32], h: f32) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Central difference restricted to `coords`, for functions too expensive to
/// probe at every coordinate.
pub fn central_diff_at<F>(mut f: F, x: &[f32], h: f32, coords: &[usize]) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Outcome of comparing an autodiff gradient against a finite-difference one.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f32,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare gradients elementwise with relative error
/// `|ad - fd| / max(|ad|, |fd|)`, skipping coordinates where both magnitudes
/// are below `floor`.
pub fn compare(ad: &[f32], fd: &[f32], floor: f32) -> GradCheck {
    assert_eq!(ad.len(), fd.len(), "gradient length mismatch");
    let mut max_rel = 0.0f32;
    let mut checked = 0;
    let mut skipped = 0;
    for (&a, &f) in ad.iter().zip(fd) {
        let scale = a.abs().max(f.abs());
        if scale < floor {
            skipped += 1;
            continue;
        }
        checked += 1;
        let rel = (a - f).abs() / scale;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        checked,
        skipped,
    }
}
