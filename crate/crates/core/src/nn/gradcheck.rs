use rand::Rng;

use super::{bce_loss, Mode, ModelParams, Noise};
use crate::error::Result;
use crate::util::sigmoid;

/// Max relative error between the analytic BCE gradient and a central
/// difference, over every parameter. Noise is drawn once in eval mode and
/// frozen for both sides of each difference.
pub fn grad_check<R: Rng + ?Sized>(
    model: &ModelParams,
    x: &[f64],
    y: u8,
    eps: f64,
    rng: &mut R,
) -> Result<f64> {
    let noise = model.sample_noise(Mode::Eval, rng);
    grad_check_with_noise(model, x, y, eps, &noise)
}

pub fn grad_check_with_noise(
    model: &ModelParams,
    x: &[f64],
    y: u8,
    eps: f64,
    noise: &Noise,
) -> Result<f64> {
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let (_, analytic) = model.loss_and_grad(x, y, noise)?;
    let base = model.flatten();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut params = base.clone();
    for k in 0..base.len() {
        params[k] = base[k] + eps;
        probe.set_flat(&params);
        let up = bce_loss(sigmoid(probe.logit_with_noise(x, noise)?), y);
        params[k] = base[k] - eps;
        probe.set_flat(&params);
        let down = bce_loss(sigmoid(probe.logit_with_noise(x, noise)?), y);
        params[k] = base[k];
        let fd = (up - down) / (2.0 * eps);
        let a = analytic[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
