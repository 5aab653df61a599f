use glimpse_core::learning::Objective;

/// Normwise relative error of the analytic gradient against central
/// differences with step `1e-5`.
pub fn gradient_error(obj: &dyn Objective, x: &[f64]) -> f64 {
    let (_, g) = obj.value_grad(x).unwrap();
    let h = 1e-5;
    let mut num = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = obj.value_grad(&xp).unwrap().0;
        xp[i] = x[i] - h;
        let fm = obj.value_grad(&xp).unwrap().0;
        xp[i] = x[i];
        num[i] = (fp - fm) / (2.0 * h);
    }
    let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale
}
