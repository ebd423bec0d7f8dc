//! Central finite-difference verification of reverse-mode gradients.

use super::Tensor;

/// One flagged parameter entry: (name, flat index, analytic, numeric, rel err).
pub type Offender = (String, usize, f32, f32, f32);

/// Result of a finite-difference sweep.
pub struct GradCheckReport {
    pub max_rel_err: f32,
    /// Worst entries first, capped at ten.
    pub worst: Vec<Offender>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f32) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `loss` is evaluated with individual parameter entries perturbed by `+/-eps`
/// in place. The relative error denominator is floored at 1% of the largest
/// gradient magnitude seen, so near-zero entries are measured against the
/// gradient's overall scale instead of dividing by rounding noise.
pub fn grad_check(
    params: &mut [(String, Tensor)],
    mut loss: impl FnMut(&[(String, Tensor)]) -> f64,
    analytic: &[(String, Vec<f32>)],
    eps: f32,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "parameter/gradient list mismatch");
    let mut entries: Vec<Offender> = Vec::new();
    let mut scale = 0.0f32;
    for p in 0..params.len() {
        assert_eq!(params[p].0, analytic[p].0, "gradient order must match parameters");
        for i in 0..params[p].1.numel() {
            let orig = params[p].1.data()[i];
            params[p].1.data_mut()[i] = orig + eps;
            let up = loss(params);
            params[p].1.data_mut()[i] = orig - eps;
            let down = loss(params);
            params[p].1.data_mut()[i] = orig;
            let numeric = ((up - down) / (2.0 * eps as f64)) as f32;
            let a = analytic[p].1[i];
            scale = scale.max(a.abs()).max(numeric.abs());
            entries.push((params[p].0.clone(), i, a, numeric, 0.0));
        }
    }
    let floor = (scale * 0.01).max(f32::MIN_POSITIVE);
    for e in &mut entries {
        let denom = e.2.abs().max(e.3.abs()).max(floor);
        e.4 = (e.2 - e.3).abs() / denom;
    }
    entries.sort_by(|a, b| b.4.partial_cmp(&a.4).unwrap());
    let max_rel_err = entries.first().map(|e| e.4).unwrap_or(0.0);
    let checked = entries.len();
    entries.truncate(10);
    GradCheckReport { max_rel_err, worst: entries, checked }
}
